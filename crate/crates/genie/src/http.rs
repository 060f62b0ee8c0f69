//! HTTP client for remote policy and reward backends.
//!
//! The wire protocol is two JSON endpoints on one base URL:
//!
//! * `POST {base}/v1/propose` takes `{goal, history_summaries, current_screenshot, k}`
//!   and returns `{candidates: [action, ...]}` in the unified action JSON form.
//! * `POST {base}/v1/score` takes a full reward query
//!   `{goal, history_summaries, windowed_screenshots, current_screenshot, candidate}`
//!   and returns `{p_positive}`, the backend-normalized probability of the
//!   positive judgment.
//!
//! Screenshots travel as `{digest, png_base64?}`. Synthetic screenshots are
//! content digests with no pixel payload, so this client always omits
//! `png_base64`; servers that store pixels keyed by digest can resolve them.
//!
//! Transport failures and 5xx responses are retried (3 attempts, exponential
//! backoff) and then surface as [`BackendError::Unreachable`]; any other
//! non-success status and any response that does not parse surface as
//! [`BackendError::Protocol`]. The client pools connections and is safe to
//! call from many threads at once.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::action::{serialize_action, Action};
use crate::backend::{
    BackendError, PolicyBackend, PolicyProposal, RewardBackend, RewardQuery, RewardScore,
    DEFAULT_THETA,
};
use crate::session::{Observation, ScreenshotRef};

const PROPOSE_PATH: &str = "/v1/propose";
const SCORE_PATH: &str = "/v1/score";

/// Connection settings for a remote backend.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`; endpoint paths are appended.
    pub base_url: String,
    /// Decision threshold applied to returned probabilities.
    pub theta: f64,
    /// Total attempts per request, counting the first.
    pub max_attempts: u32,
    /// Sleep before the first retry; doubles per subsequent retry.
    pub initial_backoff: Duration,
    /// Per-request timeout covering connect, write, and read.
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            theta: DEFAULT_THETA,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(30),
        }
    }
}

/// A remote backend speaking the JSON protocol; implements both
/// [`PolicyBackend`] and [`RewardBackend`].
pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_config(HttpConfig::new(base_url))
    }

    pub fn with_config(cfg: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
        HttpBackend { cfg, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    /// POST `body` to `path`, retrying transport failures and 5xx with
    /// exponential backoff.
    fn post_json<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let url = format!("{}{path}", self.cfg.base_url.trim_end_matches('/'));
        let mut backoff = self.cfg.initial_backoff;
        let mut last_failure = String::new();
        for attempt in 0..self.cfg.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.agent.post(&url).send_json(body) {
                Ok(response) => {
                    return response.into_json::<Resp>().map_err(|e| {
                        BackendError::Protocol(format!("{url}: invalid response body: {e}"))
                    });
                }
                Err(ureq::Error::Status(code, response)) if (500..600).contains(&code) => {
                    last_failure = format!("{url}: server error {code}");
                    drop(response);
                }
                Err(ureq::Error::Status(code, response)) => {
                    let detail = response.into_string().unwrap_or_default();
                    let detail = detail.chars().take(200).collect::<String>();
                    return Err(BackendError::Protocol(format!(
                        "{url}: unexpected status {code}: {detail}"
                    )));
                }
                Err(ureq::Error::Transport(t)) => {
                    last_failure = format!("{url}: {t}");
                }
            }
        }
        Err(BackendError::Unreachable(format!(
            "{last_failure} (after {} attempts)",
            self.cfg.max_attempts.max(1)
        )))
    }
}

/// Screenshot as it travels on the wire: always the digest, optionally the
/// PNG bytes base64-encoded. Digest-only refs omit the payload.
#[derive(Debug, Serialize, Deserialize)]
struct WireScreenshot {
    digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    png_base64: Option<String>,
}

impl From<&ScreenshotRef> for WireScreenshot {
    fn from(s: &ScreenshotRef) -> Self {
        WireScreenshot { digest: s.digest.clone(), png_base64: None }
    }
}

#[derive(Serialize)]
struct ProposeRequest<'a> {
    goal: &'a str,
    history_summaries: &'a [String],
    current_screenshot: WireScreenshot,
    k: usize,
}

#[derive(Deserialize)]
struct ProposeResponse {
    candidates: Vec<Action>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    goal: &'a str,
    history_summaries: &'a [String],
    windowed_screenshots: Vec<WireScreenshot>,
    current_screenshot: WireScreenshot,
    candidate: &'a Action,
}

#[derive(Deserialize)]
struct ScoreResponse {
    p_positive: f64,
}

impl PolicyBackend for HttpBackend {
    fn propose(
        &self,
        goal: &str,
        observation: &Observation,
        history_summaries: &[String],
        k: usize,
    ) -> Result<PolicyProposal, BackendError> {
        let request = ProposeRequest {
            goal,
            history_summaries,
            current_screenshot: (&observation.screenshot).into(),
            k,
        };
        let response: ProposeResponse = self.post_json(PROPOSE_PATH, &request)?;
        if response.candidates.is_empty() {
            return Err(BackendError::Protocol("propose returned no candidates".into()));
        }
        for candidate in &response.candidates {
            candidate.validate().map_err(|e| {
                BackendError::Protocol(format!(
                    "propose returned invalid candidate {}: {e}",
                    serialize_action(candidate)
                ))
            })?;
        }
        Ok(PolicyProposal::from_candidates(response.candidates, k))
    }
}

impl RewardBackend for HttpBackend {
    fn score(&self, query: &RewardQuery) -> Result<RewardScore, BackendError> {
        let request = ScoreRequest {
            goal: &query.goal,
            history_summaries: &query.history_summaries,
            windowed_screenshots: query.windowed_screenshots.iter().map(Into::into).collect(),
            current_screenshot: (&query.current_screenshot).into(),
            candidate: &query.candidate,
        };
        let response: ScoreResponse = self.post_json(SCORE_PATH, &request)?;
        let p = response.p_positive;
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(BackendError::Protocol(format!(
                "score returned p_positive outside [0,1]: {p}"
            )));
        }
        Ok(RewardScore::from_p(p, self.cfg.theta))
    }
}

/// Default step-judgment prompt for backends wrapping a generic multimodal
/// model that was never trained to emit reward tokens. Placeholders:
/// `{goal}`, `{history}`, `{candidate}`.
pub const STEP_REWARD_PROMPT: &str = "\
You are evaluating one step taken by a mobile GUI agent.

Task goal: {goal}

Previous actions, oldest first:
{history}

The attached screenshots are the most recent screens, oldest first; the last
image is the current screen.

Proposed next action: {candidate}

Decide whether executing this action now makes correct progress toward the
goal. Answer with exactly one token: + if the action is correct, - otherwise.";

/// Default whole-task judgment prompt, used when the candidate is a
/// `terminate` action. Placeholders: `{goal}`, `{history}`, `{candidate}`.
pub const OUTCOME_REWARD_PROMPT: &str = "\
You are evaluating whether a mobile GUI agent finished its task.

Task goal: {goal}

Actions performed, oldest first:
{history}

The attached screenshots are the most recent screens, oldest first; the last
image is the final screen.

The agent now claims: {candidate}

Decide whether the task goal has actually been achieved on the final screen.
Answer with exactly one token: + if the task is complete, - otherwise.";

/// Render the default prompt for `query`: the outcome template for terminate
/// candidates, the step template otherwise. History lines are numbered from
/// 1; an empty history renders as "(none)".
pub fn render_reward_prompt(query: &RewardQuery) -> String {
    let template =
        if query.is_outcome() { OUTCOME_REWARD_PROMPT } else { STEP_REWARD_PROMPT };
    let history = if query.history_summaries.is_empty() {
        "(none)".to_owned()
    } else {
        query
            .history_summaries
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    };
    template
        .replace("{goal}", &query.goal)
        .replace("{history}", &history)
        .replace("{candidate}", &serialize_action(&query.candidate))
}
