//! Failure buckets mapped to exit codes, printed as one JSON object on
//! stderr so wrapping tools can parse failures without scraping text.

use genie::backend::BackendError;
use genie::eval::EvalError;
use genie::explore::ExploreError;
use genie::io::IoError;
use genie::label::LabelError;
use genie::reward_data::RewardDataError;
use genie::rounds::RoundError;
use genie::trajectory::TrajectoryError;
use genie::world::WorldError;
use serde::Serialize;
use thiserror::Error;

/// One bucket per exit code. Flags, config files, and parameter combinations
/// are config errors; remote or oracle backend failures are backend errors;
/// unreadable or inconsistent artifacts are data errors.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Data(String),
}

#[derive(Serialize)]
struct ErrorEnvelope<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Backend(_) => "backend",
            CliError::Data(_) => "data",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    /// Print the machine-readable envelope and return the exit code.
    pub fn report(&self) -> std::process::ExitCode {
        let envelope = ErrorEnvelope {
            error: ErrorBody { kind: self.kind(), message: self.to_string() },
        };
        eprintln!("{}", serde_json::to_string(&envelope).expect("error envelopes serialize"));
        std::process::ExitCode::from(self.exit_code())
    }
}

impl From<BackendError> for CliError {
    fn from(err: BackendError) -> Self {
        CliError::Backend(err.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(err: IoError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<WorldError> for CliError {
    fn from(err: WorldError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<TrajectoryError> for CliError {
    fn from(err: TrajectoryError) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<ExploreError> for CliError {
    fn from(err: ExploreError) -> Self {
        match err {
            ExploreError::Config(msg) => CliError::Config(msg),
            ExploreError::Backend { source, .. } => CliError::Backend(source.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LabelError> for CliError {
    fn from(err: LabelError) -> Self {
        match err {
            LabelError::Backend(source) => CliError::Backend(source.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<RewardDataError> for CliError {
    fn from(err: RewardDataError) -> Self {
        match err {
            RewardDataError::Backend(source) => CliError::Backend(source.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<RoundError> for CliError {
    fn from(err: RoundError) -> Self {
        match err {
            RoundError::Config(msg) => CliError::Config(msg),
            RoundError::Trainer(msg) => CliError::Backend(msg),
            RoundError::Data(RewardDataError::Backend(source)) => {
                CliError::Backend(source.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(err: EvalError) -> Self {
        match err {
            EvalError::Backend(source) => CliError::Backend(source.to_string()),
            EvalError::Data(RewardDataError::Backend(source)) => {
                CliError::Backend(source.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}
