//! Step-level labeling of explored trajectories by continuation rollouts:
//! a step is correct if some continuation from its post-state still finishes
//! the task within the remaining budget.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Op, TerminateStatus};
use crate::backend::{build_reward_query, BackendError, PolicyBackend, RewardBackend};
use crate::explore::{verify_outcome, BeamConfig, ExploreError};
use crate::io::{read_jsonl, write_jsonl, IoError};
use crate::reward_data::{RewardSample, SampleLabel, SampleSource};
use crate::seed::derive_seed;
use crate::session::EnvSession;
use crate::trajectory::{replay_strict, OutcomeLabel, Trajectory, TrajectoryError};
use crate::world::SyntheticWorld;

/// Default number of continuation rollouts per labeled step.
pub const DEFAULT_N_ROLLOUTS: u32 = 5;

/// How a step label was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    /// The whole trajectory passed outcome verification.
    SuccessTrajectory,
    /// `count` of the sampled continuations completed the task.
    RolloutSuccess { count: u32 },
    /// No sampled continuation completed the task (or none could run).
    RolloutFailure,
    /// Exhaustive search found a completing continuation within budget.
    ExhaustiveReachable,
    /// Exhaustive search proved no continuation can complete within budget.
    ExhaustiveUnreachable,
}

impl Evidence {
    fn label(&self) -> SampleLabel {
        match self {
            Evidence::SuccessTrajectory
            | Evidence::RolloutSuccess { .. }
            | Evidence::ExhaustiveReachable => SampleLabel::YPlus,
            Evidence::RolloutFailure | Evidence::ExhaustiveUnreachable => SampleLabel::YMinus,
        }
    }
}

/// Label of one step of one trajectory. The label is derived from the
/// evidence at construction and re-checked on deserialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StepLabelRepr")]
pub struct StepLabel {
    pub trajectory_id: String,
    pub step_index: usize,
    pub label: SampleLabel,
    pub evidence: Evidence,
    pub rollouts_used: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLabelRepr {
    trajectory_id: String,
    step_index: usize,
    label: SampleLabel,
    evidence: Evidence,
    rollouts_used: u32,
}

impl TryFrom<StepLabelRepr> for StepLabel {
    type Error = String;

    fn try_from(r: StepLabelRepr) -> Result<Self, String> {
        if let Evidence::RolloutSuccess { count: 0 } = r.evidence {
            return Err("rollout_success evidence needs a positive count".to_owned());
        }
        if r.label != r.evidence.label() {
            return Err(format!("label {:?} inconsistent with evidence {:?}", r.label, r.evidence));
        }
        Ok(StepLabel {
            trajectory_id: r.trajectory_id,
            step_index: r.step_index,
            label: r.label,
            evidence: r.evidence,
            rollouts_used: r.rollouts_used,
        })
    }
}

impl StepLabel {
    pub fn new(
        trajectory_id: impl Into<String>,
        step_index: usize,
        evidence: Evidence,
        rollouts_used: u32,
    ) -> Self {
        if let Evidence::RolloutSuccess { count } = evidence {
            assert!(count >= 1, "rollout_success evidence needs a positive count");
        }
        StepLabel {
            trajectory_id: trajectory_id.into(),
            step_index,
            label: evidence.label(),
            evidence,
            rollouts_used,
        }
    }
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Replay(#[from] TrajectoryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<ExploreError> for LabelError {
    fn from(err: ExploreError) -> Self {
        match err {
            ExploreError::Backend { source, .. } => LabelError::Backend(source),
            other => LabelError::Precondition(other.to_string()),
        }
    }
}

/// One greedy width-1 reward-guided continuation from a replayed prefix.
/// The rollout's own RNG breaks score ties uniformly, which is the only
/// stochasticity: backends themselves are deterministic. Returns whether the
/// continuation ended in a verified completion claim.
fn rollout_succeeds(
    session: &EnvSession,
    prefix: &Trajectory,
    policy: &dyn PolicyBackend,
    scorer: &dyn RewardBackend,
    cfg: &BeamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<bool, LabelError> {
    let goal = &prefix.task.goal_text;
    let mut session = session.clone();
    let mut t = prefix.clone();
    while session.terminal().is_running() {
        let proposal =
            policy.propose(goal, &t.final_observation, &t.action_descs(), cfg.k_candidates)?;
        if proposal.candidates.is_empty() {
            return Ok(false);
        }
        let mut scored = Vec::with_capacity(proposal.candidates.len());
        for candidate in proposal.candidates {
            let query = build_reward_query(goal, &t, candidate.clone(), cfg.window);
            let score = scorer.score(&query)?;
            scored.push((candidate, score.p_positive));
        }
        let best = scored.iter().map(|(_, p)| *p).fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> =
            (0..scored.len()).filter(|&i| scored[i].1 == best).collect();
        let chosen = scored.swap_remove(ties[rng.gen_range(0..ties.len())]).0;
        let terminate = chosen.is_terminate();
        let (obs, _) = session.step(&chosen).expect("running sessions accept steps");
        t.record(chosen, obs);
        if terminate {
            return Ok(verify_outcome(&t, scorer, cfg.outcome_threshold, cfg.window)?);
        }
    }
    // Budget ran out without a completion claim.
    Ok(false)
}

/// Label every step of a trajectory.
///
/// Success trajectories label every step correct. For failures, each step is
/// judged by `n_rollouts` independent continuations replayed from its
/// post-state: one verified completion makes the step correct. The final
/// terminate step of a failed trajectory is incorrect by definition; its
/// claim already failed verification.
pub fn label_trajectory(
    t: &Trajectory,
    world: &Arc<SyntheticWorld>,
    policy: &dyn PolicyBackend,
    scorer: &dyn RewardBackend,
    n_rollouts: u32,
    cfg: &BeamConfig,
    seed: u64,
) -> Result<Vec<StepLabel>, LabelError> {
    let outcome = t.outcome_label.ok_or_else(|| {
        LabelError::Precondition("trajectory has no outcome label".to_owned())
    })?;
    if n_rollouts == 0 {
        return Err(LabelError::Precondition("n_rollouts must be positive".to_owned()));
    }
    let id = t.id();
    if outcome == OutcomeLabel::Success {
        return Ok((0..t.len())
            .map(|i| StepLabel::new(&id, i, Evidence::SuccessTrajectory, 0))
            .collect());
    }

    (0..t.len())
        .into_par_iter()
        .map(|i| {
            let is_final_terminate =
                i == t.len() - 1 && t.steps[i].action.is_terminate();
            if is_final_terminate {
                return Ok(StepLabel::new(&id, i, Evidence::RolloutFailure, 0));
            }
            let prefix = t.prefix(i + 1);
            let session = replay_strict(world, &prefix)?;
            let mut successes = 0u32;
            for r in 0..n_rollouts {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &["rollout", &id, &i.to_string(), &r.to_string()],
                ));
                if rollout_succeeds(&session, &prefix, policy, scorer, cfg, &mut rng)? {
                    successes += 1;
                }
            }
            let evidence = if successes > 0 {
                Evidence::RolloutSuccess { count: successes }
            } else {
                Evidence::RolloutFailure
            };
            Ok(StepLabel::new(&id, i, evidence, n_rollouts))
        })
        .collect()
}

/// Label every step by exhaustive enumeration: breadth-first search over all
/// action continuations from the step's post-state, bounded by the remaining
/// budget. A step is correct iff the goal can be reached in `d` further moves
/// and claimed with one more, `d + 1 ≤` steps remaining. Ground truth for
/// validating the sampled labeler.
pub fn label_trajectory_exhaustive(
    t: &Trajectory,
    world: &Arc<SyntheticWorld>,
) -> Result<Vec<StepLabel>, LabelError> {
    let id = t.id();
    let goal_texts = world.goal.referenced_texts();
    let menus: std::collections::BTreeMap<String, Vec<crate::action::Action>> = world
        .screens
        .keys()
        .map(|s| (s.clone(), crate::oracle::menu_for_screen(world, s, &goal_texts)))
        .collect();

    (0..t.len())
        .into_par_iter()
        .map(|i| {
            let session = replay_strict(world, &t.prefix(i + 1))?;
            let reachable = if let Op::Terminate { status } = &t.steps[i].action.op {
                // The claim itself is the continuation; it is correct iff it
                // truthfully reported completion.
                *status == TerminateStatus::Success && session.goal_satisfied()
            } else if !session.terminal().is_running() {
                false
            } else {
                goal_claimable(&session, &menus)
            };
            let evidence = if reachable {
                Evidence::ExhaustiveReachable
            } else {
                Evidence::ExhaustiveUnreachable
            };
            Ok(StepLabel::new(&id, i, evidence, 0))
        })
        .collect()
}

/// Budget-bounded BFS over continuations: true iff some state satisfying the
/// goal is reachable in `d` moves with `d + 1 ≤` remaining steps (the `+ 1`
/// pays for the terminate claim).
fn goal_claimable(
    session: &EnvSession,
    menus: &std::collections::BTreeMap<String, Vec<crate::action::Action>>,
) -> bool {
    let remaining = session.steps_remaining();
    if remaining == 0 {
        return false;
    }
    let mut visited: BTreeSet<String> = BTreeSet::new();
    visited.insert(session.state_key());
    let mut frontier = vec![session.clone()];
    // Layer d holds states d moves deep; the deepest useful layer leaves one
    // step for the claim.
    for depth in 0..remaining {
        if frontier.iter().any(|s| s.goal_satisfied()) {
            return true;
        }
        if depth + 1 > remaining - 1 {
            break;
        }
        let mut next = Vec::new();
        for state in &frontier {
            for action in &menus[state.current_screen()] {
                let mut fork = state.clone();
                fork.step(action).expect("running sessions accept steps");
                if visited.insert(fork.state_key()) {
                    next.push(fork);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    false
}

/// Package step labels as reward-model training samples: each step's query
/// carries its original candidate action, labeled by the rollout evidence.
/// The final terminate step of a failed trajectory becomes an outcome-level
/// negative.
pub fn exploration_samples(
    t: &Trajectory,
    labels: &[StepLabel],
    window: usize,
) -> Result<Vec<RewardSample>, LabelError> {
    let id = t.id();
    let mut samples = Vec::with_capacity(labels.len());
    for label in labels {
        if label.trajectory_id != id {
            return Err(LabelError::Precondition(format!(
                "label belongs to trajectory {}, not {}",
                label.trajectory_id, id
            )));
        }
        if label.step_index >= t.len() {
            return Err(LabelError::Precondition(format!(
                "step index {} out of range for a {}-step trajectory",
                label.step_index,
                t.len()
            )));
        }
        let prefix = t.prefix(label.step_index);
        let query = build_reward_query(
            &t.task.goal_text,
            &prefix,
            t.steps[label.step_index].action.clone(),
            window,
        );
        samples.push(RewardSample::new(
            query,
            label.label,
            SampleSource::Exploration,
            &[&t.task.task_id, &label.step_index.to_string()],
        ));
    }
    Ok(samples)
}

pub fn write_step_labels(labels: &[StepLabel], path: &Path) -> Result<(), LabelError> {
    write_jsonl(path, labels)?;
    Ok(())
}

pub fn read_step_labels(path: &Path) -> Result<Vec<StepLabel>, LabelError> {
    Ok(read_jsonl(path)?)
}
