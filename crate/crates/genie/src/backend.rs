//! Backend-agnostic contracts: the policy that proposes candidate actions,
//! the reward scorer that judges them, and the reward-query builder that
//! enforces the history-windowing rule.
//!
//! A reward query carries the task goal, a language summary of every prior
//! step, at most `window` recent screenshots (default 5), the current
//! screenshot, and one candidate action. Outcome (whole-task) scoring is not
//! a separate interface: it is exactly step scoring of a `terminate`
//! candidate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{serialize_action, Action, Label};
use crate::session::{Observation, ScreenshotRef};
use crate::trajectory::Trajectory;

/// Default screenshot window size.
pub const DEFAULT_WINDOW: usize = 5;
/// Default decision threshold on `p_positive`.
pub const DEFAULT_THETA: f64 = 0.5;
/// Default number of candidates requested per proposal.
pub const DEFAULT_K_CANDIDATES: usize = 10;

/// The exact payload a reward backend scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardQuery {
    /// Task goal text.
    pub goal: String,
    /// One language summary per prior step, oldest first; covers every step
    /// even when its screenshot fell out of the window.
    pub history_summaries: Vec<String>,
    /// At most the window size, most recent prior screenshots, oldest first.
    pub windowed_screenshots: Vec<ScreenshotRef>,
    /// The screenshot the candidate would act on.
    pub current_screenshot: ScreenshotRef,
    /// Candidate action; a `terminate` candidate makes this an outcome query.
    pub candidate: Action,
}

impl RewardQuery {
    /// Stable identity for noise derivation and caching: hashes the goal,
    /// history, screenshots, and candidate.
    pub fn identity(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let mut put = |part: &str| {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        };
        put(&self.goal);
        for s in &self.history_summaries {
            put(s);
        }
        for s in &self.windowed_screenshots {
            put(&s.digest);
        }
        put(&self.current_screenshot.digest);
        put(&serialize_action(&self.candidate));
        crate::world::hex(&hasher.finalize())
    }

    /// True iff this is an outcome (whole-task) query.
    pub fn is_outcome(&self) -> bool {
        self.candidate.is_terminate()
    }
}

/// A scored query: probability of the positive judgment plus its thresholded
/// label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub p_positive: f64,
    pub label: Label,
}

impl RewardScore {
    /// Build a score from a probability and threshold.
    ///
    /// # Panics
    /// Panics when `p` is not a probability.
    pub fn from_p(p: f64, theta: f64) -> Self {
        assert!((0.0..=1.0).contains(&p), "p_positive must be in [0,1], got {p}");
        RewardScore { p_positive: p, label: if p >= theta { Label::Positive } else { Label::Negative } }
    }

    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }
}

/// A policy's candidate set for one state: deduplicated, at most `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyProposal {
    pub candidates: Vec<Action>,
}

impl PolicyProposal {
    /// Deduplicate by canonical serialization, keeping first occurrences,
    /// and truncate to `k`. First occurrences are kept so that the proposal
    /// for a smaller `k` is always a prefix of the proposal for a larger one.
    pub fn from_candidates(raw: Vec<Action>, k: usize) -> Self {
        assert!(k >= 1, "k must be at least 1");
        let mut seen = std::collections::BTreeSet::new();
        let mut candidates = Vec::new();
        for action in raw {
            if candidates.len() == k {
                break;
            }
            if seen.insert(serialize_action(&action)) {
                candidates.push(action);
            }
        }
        PolicyProposal { candidates }
    }
}

/// Errors surfaced by backends.
#[derive(Debug, Error)]
pub enum BackendError {
    /// Transport failure after retries (connection refused, timeouts, 5xx).
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    /// The remote answered with something that is not the protocol.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The backend cannot serve this query (e.g. oracle on a foreign world).
    #[error("unsupported query: {0}")]
    Unsupported(String),
}

/// Proposes candidate actions for the current state.
///
/// Implementations must be safe for concurrent calls and deterministic given
/// their configuration; callers fan one batch out across threads.
pub trait PolicyBackend: Send + Sync {
    fn propose(
        &self,
        goal: &str,
        observation: &Observation,
        history_summaries: &[String],
        k: usize,
    ) -> Result<PolicyProposal, BackendError>;
}

/// Scores reward queries.
///
/// Implementations must be safe for concurrent calls; scores must not depend
/// on call order (noise, if any, must be derived from the query itself).
pub trait RewardBackend: Send + Sync {
    fn score(&self, query: &RewardQuery) -> Result<RewardScore, BackendError>;
}

/// Build the reward query for scoring `candidate` after the steps of
/// `prefix`.
///
/// Windowing rule: with `n` prior steps, the query carries all `n` action
/// summaries and the `min(n, window)` most recent prior screenshots, oldest
/// first. The current screenshot is the prefix's final observation; `window`
/// = 0 drops all prior screenshots (the history-ablation configuration).
pub fn build_reward_query(
    goal: &str,
    prefix: &Trajectory,
    candidate: Action,
    window: usize,
) -> RewardQuery {
    let n = prefix.steps.len();
    let start = n.saturating_sub(window);
    RewardQuery {
        goal: goal.to_owned(),
        history_summaries: prefix.action_descs(),
        windowed_screenshots: prefix.steps[start..]
            .iter()
            .map(|s| s.observation.screenshot.clone())
            .collect(),
        current_screenshot: prefix.final_observation.screenshot.clone(),
        candidate,
    }
}
