//! Trajectories: recorded (observation, action) sequences for a task, with
//! replay against a world and a JSONL wire format.
//!
//! Each step stores the observation the agent acted on; the trajectory also
//! keeps the observation after its last executed step so that scoring a
//! next-action candidate has a current screenshot. Replay is the ground
//! truth for corruption checks: strict replay asserts digest equality per
//! step, relaxed replay just executes actions and reports the final state.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{serialize_action, Action};
use crate::io::{self, IoError};
use crate::session::{reset, EnvSession, Observation, Terminal};
use crate::world::{hex, SyntheticWorld};

/// Schema tag written into trajectory files.
pub const TRAJECTORY_SCHEMA_VERSION: &str = "trajectory.v1";

/// Where a task came from in the self-improvement loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    SeedDataset,
    /// Tasks produced by a generator hook (an LLM in the full pipeline).
    #[serde(alias = "generator_hook")]
    LlmExpansion,
    FailedRetry,
    ManualComplex,
}

/// A task to execute: the goal text plus bookkeeping identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub goal_text: String,
    pub task_id: String,
    pub source: TaskSource,
    /// Ground-truth step count when known; drives difficulty bucketing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_length: Option<u32>,
}

impl TaskInstruction {
    pub fn new(goal_text: impl Into<String>, task_id: impl Into<String>, source: TaskSource) -> Self {
        let goal_text = goal_text.into();
        assert!(!goal_text.is_empty(), "goal_text must be nonempty");
        TaskInstruction { goal_text, task_id: task_id.into(), source, reference_length: None }
    }

    pub fn with_reference_length(mut self, len: u32) -> Self {
        self.reference_length = Some(len);
        self
    }

    /// The canonical task of a generated world: reach its goal screen. The
    /// reference length is the chain depth plus the final terminate.
    pub fn for_world(world: &SyntheticWorld, task_id: impl Into<String>) -> Self {
        let goal_text = match &world.goal {
            crate::world::GoalPredicate::OnScreen { screen } => {
                format!("Navigate the app to the {screen} screen and finish")
            }
            _ => "Complete the configured goal and finish".to_owned(),
        };
        let mut task = TaskInstruction::new(goal_text, task_id, TaskSource::SeedDataset);
        if let Some(meta) = &world.meta {
            task.reference_length = Some(meta.depth + 1);
        }
        task
    }
}

/// Final outcome assigned to a trajectory by verification or construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLabel {
    Success,
    Failure,
}

/// One recorded step: the observation the agent saw and the action it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub observation: Observation,
    pub action: Action,
}

/// A recorded rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskInstruction,
    /// Content id of the world this was recorded in; donor trajectories for
    /// corruption must match it.
    pub world_id: String,
    pub steps: Vec<TrajectoryStep>,
    /// Observation after the last executed step (the reset observation when
    /// no steps have run): the current screenshot for next-action scoring.
    pub final_observation: Observation,
    pub terminal: Terminal,
    pub outcome_label: Option<OutcomeLabel>,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("replay diverged at step {step}: {message}")]
    Replay { step: usize, message: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

impl Trajectory {
    /// Start recording from a reset observation.
    pub fn begin(task: TaskInstruction, world_id: impl Into<String>, reset_obs: Observation) -> Self {
        Trajectory {
            task,
            world_id: world_id.into(),
            steps: Vec::new(),
            final_observation: reset_obs,
            terminal: Terminal::Running,
            outcome_label: None,
        }
    }

    /// Record one executed step: the action taken at the current final
    /// observation and the observation it produced.
    pub fn record(&mut self, action: Action, post_observation: Observation) {
        let observation = std::mem::replace(&mut self.final_observation, post_observation);
        self.steps.push(TrajectoryStep { observation, action });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Action summaries of every step, in order.
    pub fn action_descs(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.action.desc.clone()).collect()
    }

    /// The first `n` steps as a running trajectory. The prefix's final
    /// observation is the observation step `n` was taken from (or this
    /// trajectory's final observation when `n` equals the full length).
    ///
    /// # Panics
    /// Panics when `n` exceeds the trajectory length.
    pub fn prefix(&self, n: usize) -> Trajectory {
        assert!(n <= self.steps.len(), "prefix length out of range");
        let final_observation = if n < self.steps.len() {
            self.steps[n].observation.clone()
        } else {
            self.final_observation.clone()
        };
        Trajectory {
            task: self.task.clone(),
            world_id: self.world_id.clone(),
            steps: self.steps[..n].to_vec(),
            final_observation,
            terminal: Terminal::Running,
            outcome_label: None,
        }
    }

    /// Content identity: hash of task id, world id, and the canonical action
    /// sequence. Used to deduplicate successes found by multiple beams.
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        for part in [self.task.task_id.as_str(), self.world_id.as_str()] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        for step in &self.steps {
            let text = serialize_action(&step.action);
            hasher.update((text.len() as u64).to_le_bytes());
            hasher.update(text.as_bytes());
        }
        hex(&hasher.finalize())
    }

    /// Structural invariants: a terminate action appears at most once and
    /// only as the last step, and non-running trajectories are nonempty.
    pub fn check_shape(&self) -> Result<(), TrajectoryError> {
        for (i, step) in self.steps.iter().enumerate() {
            if step.action.is_terminate() && i + 1 != self.steps.len() {
                return Err(TrajectoryError::Malformed(format!(
                    "terminate action at step {i} is not last"
                )));
            }
        }
        if !self.terminal.is_running() && self.steps.is_empty() {
            return Err(TrajectoryError::Malformed(
                "terminal trajectory has no steps".to_owned(),
            ));
        }
        Ok(())
    }
}

/// Strict replay: execute the recorded actions against a fresh session,
/// asserting that every recorded observation digest matches. Divergence is a
/// hard error. Returns the session in its post-trajectory state.
pub fn replay_strict(
    world: &Arc<SyntheticWorld>,
    trajectory: &Trajectory,
) -> Result<EnvSession, TrajectoryError> {
    if trajectory.world_id != world.world_id() {
        return Err(TrajectoryError::Replay {
            step: 0,
            message: format!(
                "trajectory was recorded in world {}, not {}",
                trajectory.world_id,
                world.world_id()
            ),
        });
    }
    let (mut session, mut obs) = reset(world.clone());
    for (i, step) in trajectory.steps.iter().enumerate() {
        if obs.screenshot.digest != step.observation.screenshot.digest {
            return Err(TrajectoryError::Replay {
                step: i,
                message: format!(
                    "recorded digest {} but session shows {}",
                    step.observation.screenshot.digest, obs.screenshot.digest
                ),
            });
        }
        let (next, _) = session.step(&step.action).map_err(|e| TrajectoryError::Replay {
            step: i,
            message: e.to_string(),
        })?;
        obs = next;
    }
    Ok(session)
}

/// Relaxed replay: execute an action sequence from reset, ignoring recorded
/// observations. Stops early if the session becomes terminal. Returns the
/// final session plus whether the goal held at any point (after any step).
pub fn replay_actions(
    world: &Arc<SyntheticWorld>,
    actions: &[Action],
) -> (EnvSession, ReplayTrace) {
    let (mut session, _) = reset(world.clone());
    let mut goal_seen = session.goal_satisfied();
    let mut executed = 0;
    for action in actions {
        if !session.terminal().is_running() {
            break;
        }
        session.step(action).expect("running session accepts steps");
        executed += 1;
        goal_seen |= session.goal_satisfied();
    }
    let goal_at_end = session.goal_satisfied();
    (session, ReplayTrace { executed, goal_seen_mid_run: goal_seen, goal_at_end })
}

/// Summary of a relaxed replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayTrace {
    /// How many actions actually executed before the session ended.
    pub executed: usize,
    /// Whether the goal predicate held after any executed step (or at reset).
    pub goal_seen_mid_run: bool,
    /// Whether the goal predicate holds in the final state.
    pub goal_at_end: bool,
}

// ---------------------------------------------------------------------------
// JSONL wire format
// ---------------------------------------------------------------------------

/// One line of the trajectory JSONL format. A trajectory is a `header`, its
/// `step` lines in order, then a `footer`; files may concatenate many.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TrajectoryLine {
    Header {
        schema_version: String,
        task: TaskInstruction,
        world_id: String,
    },
    Step {
        index: usize,
        observation: Observation,
        action: Action,
    },
    Footer {
        final_observation: Observation,
        terminal: Terminal,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        outcome_label: Option<OutcomeLabel>,
    },
}

/// Serialize trajectories to JSONL lines.
pub fn trajectories_to_jsonl(trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajectories {
        let mut lines = Vec::with_capacity(t.steps.len() + 2);
        lines.push(TrajectoryLine::Header {
            schema_version: TRAJECTORY_SCHEMA_VERSION.to_owned(),
            task: t.task.clone(),
            world_id: t.world_id.clone(),
        });
        for (index, step) in t.steps.iter().enumerate() {
            lines.push(TrajectoryLine::Step {
                index,
                observation: step.observation.clone(),
                action: step.action.clone(),
            });
        }
        lines.push(TrajectoryLine::Footer {
            final_observation: t.final_observation.clone(),
            terminal: t.terminal,
            outcome_label: t.outcome_label,
        });
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("trajectory lines serialize"));
            out.push('\n');
        }
    }
    out
}

/// Parse trajectories from JSONL text, validating record order, step
/// indices, and schema version.
pub fn trajectories_from_jsonl(text: &str) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut out = Vec::new();
    let mut current: Option<(TaskInstruction, String, Vec<TrajectoryStep>)> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine = serde_json::from_str(line).map_err(|e| {
            TrajectoryError::Malformed(format!("line {}: {e}", lineno + 1))
        })?;
        match parsed {
            TrajectoryLine::Header { schema_version, task, world_id } => {
                if schema_version != TRAJECTORY_SCHEMA_VERSION {
                    return Err(TrajectoryError::Malformed(format!(
                        "line {}: unsupported schema version `{schema_version}`",
                        lineno + 1
                    )));
                }
                if current.is_some() {
                    return Err(TrajectoryError::Malformed(format!(
                        "line {}: header before previous footer",
                        lineno + 1
                    )));
                }
                current = Some((task, world_id, Vec::new()));
            }
            TrajectoryLine::Step { index, observation, action } => {
                let Some((_, _, steps)) = current.as_mut() else {
                    return Err(TrajectoryError::Malformed(format!(
                        "line {}: step outside a trajectory",
                        lineno + 1
                    )));
                };
                if index != steps.len() {
                    return Err(TrajectoryError::Malformed(format!(
                        "line {}: step index {index}, expected {}",
                        lineno + 1,
                        steps.len()
                    )));
                }
                steps.push(TrajectoryStep { observation, action });
            }
            TrajectoryLine::Footer { final_observation, terminal, outcome_label } => {
                let Some((task, world_id, steps)) = current.take() else {
                    return Err(TrajectoryError::Malformed(format!(
                        "line {}: footer outside a trajectory",
                        lineno + 1
                    )));
                };
                let t = Trajectory {
                    task,
                    world_id,
                    steps,
                    final_observation,
                    terminal,
                    outcome_label,
                };
                t.check_shape()?;
                out.push(t);
            }
        }
    }
    if current.is_some() {
        return Err(TrajectoryError::Malformed("missing footer at end of input".to_owned()));
    }
    Ok(out)
}

/// Write trajectories to a JSONL file atomically.
pub fn save_trajectories(path: &std::path::Path, trajectories: &[Trajectory]) -> Result<(), TrajectoryError> {
    io::atomic_write(path, trajectories_to_jsonl(trajectories).as_bytes())?;
    Ok(())
}

/// Read trajectories from a JSONL file.
pub fn load_trajectories(path: &std::path::Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    trajectories_from_jsonl(&text)
}

/// Walk a generated chain via its forward elements, then terminate. Test
/// helper for modules that need a canonical verified-success trajectory.
#[cfg(test)]
pub(crate) fn chain_walk(world: &Arc<SyntheticWorld>, task_id: &str) -> Trajectory {
    let depth = world.meta.expect("generated world").depth;
    let task = TaskInstruction::for_world(world, task_id);
    let (mut session, obs) = reset(world.clone());
    let mut t = Trajectory::begin(task, world.world_id(), obs);
    for i in 0..depth {
        let screen = world.screen(&format!("s{i:02}")).expect("chain screen");
        let forward = &screen.elements[0];
        let (cx, cy) = forward.bbox.center();
        let action = Action::click(cx, cy, format!("tap {}", forward.label));
        let (obs, _) = session.step(&action).expect("steps");
        t.record(action, obs);
    }
    let done = Action::terminate(crate::action::TerminateStatus::Success, "task finished");
    let (obs, out) = session.step(&done).expect("steps");
    assert!(out.terminal);
    t.record(done, obs);
    t.terminal = session.terminal();
    t.outcome_label = Some(OutcomeLabel::Success);
    assert!(session.goal_satisfied());
    t
}
