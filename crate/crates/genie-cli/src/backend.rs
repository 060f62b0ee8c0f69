//! Backend selection: flags or config stanzas resolve to either oracle
//! backends over the supplied worlds or an HTTP backend. `GENIE_BACKEND_URL`
//! overrides any configured HTTP endpoint.

use std::sync::Arc;

use clap::{Args, ValueEnum};
use genie::backend::{PolicyBackend, RewardBackend, DEFAULT_THETA};
use genie::http::{HttpBackend, HttpConfig};
use genie::oracle::{OracleConfig, OracleRouter};
use genie::seed::derive_seed;
use genie::world::SyntheticWorld;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const BACKEND_URL_ENV: &str = "GENIE_BACKEND_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Ground-truth backends derived from the loaded synthetic worlds.
    Oracle,
    /// Remote model server speaking the propose/score JSON protocol.
    Http,
}

/// Backend flags shared by commands that query a policy or scorer. The
/// `backend` flag is optional at the clap level because some commands (e.g.
/// exhaustive labeling) run without one; `resolve` demands it.
#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Backend implementation.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Base URL for the http backend; GENIE_BACKEND_URL overrides it.
    #[arg(long)]
    pub backend_url: Option<String>,
    /// Oracle policy noise: probability the optimal candidate is demoted.
    #[arg(long, default_value_t = 0.0)]
    pub eps_pol: f64,
    /// Oracle reward noise: probability a score is flipped.
    #[arg(long, default_value_t = 0.0)]
    pub eps_rm: f64,
    /// Decision threshold applied to reward probabilities.
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

/// Effective backend once flags, config file, and environment are folded in;
/// this is what the run manifest hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Oracle {
        #[serde(default)]
        eps_pol: f64,
        #[serde(default)]
        eps_rm: f64,
        #[serde(default = "default_theta")]
        theta: f64,
    },
    Http {
        base_url: String,
        #[serde(default = "default_theta")]
        theta: f64,
    },
}

impl BackendSpec {
    /// Apply the environment override and range-check the parameters.
    pub fn resolve(mut self) -> Result<BackendSpec, CliError> {
        if let BackendSpec::Http { base_url, .. } = &mut self {
            if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
                *base_url = url;
            }
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        match &self {
            BackendSpec::Oracle { eps_pol, eps_rm, theta } => {
                unit("eps_pol", *eps_pol)?;
                unit("eps_rm", *eps_rm)?;
                unit("theta", *theta)?;
            }
            BackendSpec::Http { theta, .. } => unit("theta", *theta)?,
        }
        Ok(self)
    }

    pub fn theta(&self) -> f64 {
        match self {
            BackendSpec::Oracle { theta, .. } | BackendSpec::Http { theta, .. } => *theta,
        }
    }
}

impl BackendArgs {
    pub fn resolve(&self) -> Result<BackendSpec, CliError> {
        let kind = self
            .backend
            .ok_or_else(|| CliError::Config("missing --backend <oracle|http>".to_owned()))?;
        let spec = match kind {
            BackendKind::Oracle => BackendSpec::Oracle {
                eps_pol: self.eps_pol,
                eps_rm: self.eps_rm,
                theta: self.theta,
            },
            BackendKind::Http => BackendSpec::Http {
                base_url: self.backend_url.clone().or_else(|| std::env::var(BACKEND_URL_ENV).ok()).ok_or_else(|| {
                    CliError::Config(format!(
                        "http backend needs --backend-url or {BACKEND_URL_ENV}"
                    ))
                })?,
                theta: self.theta,
            },
        };
        spec.resolve()
    }
}

/// A constructed policy/scorer pair.
pub enum Backends {
    Oracle(OracleRouter),
    Http(HttpBackend),
}

impl Backends {
    /// Oracle backends route over `worlds`; the oracle's noise seed derives
    /// from the command seed so one `--seed` drives the whole run.
    pub fn build(
        spec: &BackendSpec,
        worlds: &[Arc<SyntheticWorld>],
        seed: u64,
    ) -> Result<Backends, CliError> {
        match spec {
            BackendSpec::Oracle { eps_pol, eps_rm, theta } => {
                if worlds.is_empty() {
                    return Err(CliError::Config(
                        "the oracle backend needs at least one world".to_owned(),
                    ));
                }
                let cfg = OracleConfig {
                    seed: derive_seed(seed, &["backend"]),
                    eps_policy: *eps_pol,
                    eps_reward: *eps_rm,
                    theta: *theta,
                };
                Ok(Backends::Oracle(OracleRouter::from_worlds(worlds, cfg)?))
            }
            BackendSpec::Http { base_url, theta } => {
                let mut cfg = HttpConfig::new(base_url.clone());
                cfg.theta = *theta;
                Ok(Backends::Http(HttpBackend::with_config(cfg)))
            }
        }
    }

    pub fn policy(&self) -> &dyn PolicyBackend {
        match self {
            Backends::Oracle(o) => o,
            Backends::Http(h) => h,
        }
    }

    pub fn scorer(&self) -> &dyn RewardBackend {
        match self {
            Backends::Oracle(o) => o,
            Backends::Http(h) => h,
        }
    }
}
