//! Reward-guided beam search over an environment.
//!
//! Each live beam proposes up to `k_candidates` actions, every candidate is
//! scored as a reward query, and the `beam_width` best children across all
//! beams survive (global pruning, ranked by cumulative score). A `terminate`
//! child is accepted only if its outcome query clears `outcome_threshold`;
//! accepted terminations retire as verified successes without occupying a
//! beam slot, failed ones are discarded and the next-ranked child backfills.
//! The search stops at the first depth that yields a verified success, when
//! every beam is terminal, or at the step cap.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::serialize_action;
use crate::backend::{
    build_reward_query, BackendError, PolicyBackend, RewardBackend, DEFAULT_K_CANDIDATES,
    DEFAULT_THETA, DEFAULT_WINDOW,
};
use crate::session::{reset, EnvSession, Terminal};
use crate::trajectory::{OutcomeLabel, TaskInstruction, Trajectory};
use crate::world::SyntheticWorld;

/// How step scores combine into a beam's cumulative score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

impl Aggregation {
    pub fn apply(&self, scores: &[f64]) -> f64 {
        let sum: f64 = scores.iter().sum();
        match self {
            Aggregation::Sum => sum,
            Aggregation::Mean => {
                if scores.is_empty() {
                    0.0
                } else {
                    sum / scores.len() as f64
                }
            }
        }
    }
}

/// Beam-search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    /// Candidates requested per beam per step.
    pub k_candidates: usize,
    /// Live beams kept after each global pruning pass.
    pub beam_width: usize,
    /// Cap on search depth (steps per trajectory).
    pub max_steps: u32,
    /// Minimum outcome probability for accepting a claimed termination.
    pub outcome_threshold: f64,
    pub aggregation: Aggregation,
    /// Screenshot window for reward queries.
    pub window: usize,
    pub seed: u64,
}

impl BeamConfig {
    /// Default search parameters with the given step cap.
    pub fn new(max_steps: u32, seed: u64) -> Self {
        BeamConfig {
            k_candidates: DEFAULT_K_CANDIDATES,
            beam_width: 5,
            max_steps,
            outcome_threshold: DEFAULT_THETA,
            aggregation: Aggregation::Sum,
            window: DEFAULT_WINDOW,
            seed,
        }
    }

    /// Defaults with the step cap taken from the world's budget.
    pub fn for_world(world: &SyntheticWorld, seed: u64) -> Self {
        BeamConfig::new(world.max_steps, seed)
    }

    /// Greedy rollout configuration: one candidate, one beam.
    pub fn greedy(mut self) -> Self {
        self.k_candidates = 1;
        self.beam_width = 1;
        self
    }

    pub fn validate(&self) -> Result<(), ExploreError> {
        if self.k_candidates == 0 || self.beam_width == 0 || self.max_steps == 0 {
            return Err(ExploreError::Config(
                "k_candidates, beam_width, and max_steps must be positive".to_owned(),
            ));
        }
        if !(0.0..=1.0).contains(&self.outcome_threshold) {
            return Err(ExploreError::Config("outcome_threshold must be in [0,1]".to_owned()));
        }
        Ok(())
    }
}

/// Search counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreStats {
    /// Beam expansions performed (one per live beam per depth).
    pub expansions: u64,
    /// Reward queries scored.
    pub scored_queries: u64,
    /// Depths iterated.
    pub wall_steps: u64,
}

/// Outcome of exploring one task.
#[derive(Debug, Clone)]
pub struct ExplorationResult {
    /// Outcome-verified terminated trajectories, deduplicated by content id.
    pub success_trajectories: Vec<Trajectory>,
    /// Trajectories that ended without verified success: claimed failures,
    /// rejected claims, and exhausted budgets.
    pub failed_trajectories: Vec<Trajectory>,
    pub stats: ExploreStats,
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("invalid beam configuration: {0}")]
    Config(String),
    #[error("trajectory has no terminate action to verify")]
    MalformedTrajectory,
    /// Backend failure; carries the counters accumulated before the abort.
    #[error("backend failed after {} scored queries: {source}", stats.scored_queries)]
    Backend {
        #[source]
        source: BackendError,
        stats: ExploreStats,
    },
}

/// Score the outcome query of a terminated trajectory: the candidate is its
/// final `terminate` action, the history is every step before it. Returns
/// whether `p_positive` clears `theta`.
pub fn verify_outcome(
    trajectory: &Trajectory,
    scorer: &dyn RewardBackend,
    theta: f64,
    window: usize,
) -> Result<bool, ExploreError> {
    let last = trajectory.steps.last().ok_or(ExploreError::MalformedTrajectory)?;
    if !last.action.is_terminate() {
        return Err(ExploreError::MalformedTrajectory);
    }
    let prefix = trajectory.prefix(trajectory.len() - 1);
    let query =
        build_reward_query(&trajectory.task.goal_text, &prefix, last.action.clone(), window);
    let score = scorer
        .score(&query)
        .map_err(|source| ExploreError::Backend { source, stats: ExploreStats::default() })?;
    Ok(score.p_positive >= theta)
}

struct Beam {
    session: EnvSession,
    trajectory: Trajectory,
    step_scores: Vec<f64>,
}

struct Child {
    beam_index: usize,
    action: crate::action::Action,
    score: f64,
    cumulative: f64,
    /// Canonical serialization of `action`, the deterministic tie-breaker.
    tie_key: String,
}

/// Reward-guided beam search for one task.
///
/// Deterministic given the backends' configuration and `cfg.seed`; candidate
/// scoring is a pure fan-out, ranking is a serial barrier per depth.
pub fn explore_task(
    task: &TaskInstruction,
    world: &Arc<SyntheticWorld>,
    policy: &dyn PolicyBackend,
    scorer: &dyn RewardBackend,
    cfg: &BeamConfig,
) -> Result<ExplorationResult, ExploreError> {
    cfg.validate()?;
    let mut stats = ExploreStats::default();
    let world_id = world.world_id();

    let (session, observation) = reset(world.clone());
    let root = Beam {
        session,
        trajectory: Trajectory::begin(task.clone(), world_id, observation),
        step_scores: Vec::new(),
    };

    let mut live = vec![root];
    let mut successes: Vec<Trajectory> = Vec::new();
    let mut success_ids: BTreeSet<String> = BTreeSet::new();
    let mut failures: Vec<Trajectory> = Vec::new();

    for _depth in 0..cfg.max_steps {
        if live.is_empty() {
            break;
        }
        stats.wall_steps += 1;

        // Expansion: propose and score every child of every live beam.
        let mut children: Vec<Child> = Vec::new();
        for (beam_index, beam) in live.iter().enumerate() {
            stats.expansions += 1;
            let observation = &beam.trajectory.final_observation;
            let history = beam.trajectory.action_descs();
            let proposal = policy
                .propose(&task.goal_text, observation, &history, cfg.k_candidates)
                .map_err(|source| ExploreError::Backend { source, stats })?;
            for action in proposal.candidates {
                let query = build_reward_query(
                    &task.goal_text,
                    &beam.trajectory,
                    action.clone(),
                    cfg.window,
                );
                let score = scorer
                    .score(&query)
                    .map_err(|source| ExploreError::Backend { source, stats })?;
                stats.scored_queries += 1;
                let mut scores = beam.step_scores.clone();
                scores.push(score.p_positive);
                children.push(Child {
                    beam_index,
                    tie_key: serialize_action(&action),
                    action,
                    score: score.p_positive,
                    cumulative: cfg.aggregation.apply(&scores),
                });
            }
        }

        // Global pruning: rank all children, keep the best beam_width live.
        children.sort_by(|a, b| {
            b.cumulative
                .partial_cmp(&a.cumulative)
                .expect("scores are never NaN")
                .then_with(|| a.tie_key.cmp(&b.tie_key))
        });

        let mut next_live: Vec<Beam> = Vec::new();
        let mut found_success = false;
        for child in children {
            if next_live.len() == cfg.beam_width {
                break;
            }
            let parent = &live[child.beam_index];
            if child.action.is_terminate() {
                // Unified outcome rule: the child's step query is exactly the
                // outcome query, so its score is the verification result.
                if child.score >= cfg.outcome_threshold {
                    let mut t = parent.trajectory.clone();
                    let mut session = parent.session.clone();
                    let (obs, _) = session
                        .step(&child.action)
                        .expect("live beams accept steps");
                    t.record(child.action, obs);
                    t.terminal = session.terminal();
                    t.outcome_label = Some(OutcomeLabel::Success);
                    if success_ids.insert(t.id()) {
                        successes.push(t);
                    }
                    found_success = true;
                }
                // Rejected claims are dropped; the next-ranked child backfills.
                continue;
            }
            let mut session = parent.session.clone();
            let (obs, outcome) =
                session.step(&child.action).expect("live beams accept steps");
            let mut trajectory = parent.trajectory.clone();
            trajectory.record(child.action, obs);
            let mut step_scores = parent.step_scores.clone();
            step_scores.push(child.score);
            if outcome.terminal {
                // Budget ran out on this path.
                trajectory.terminal = Terminal::BudgetExhausted;
                trajectory.outcome_label = Some(OutcomeLabel::Failure);
                failures.push(trajectory);
                continue;
            }
            next_live.push(Beam { session, trajectory, step_scores });
        }

        if found_success {
            // A verified completion ends the search; deeper continuations of
            // the remaining beams could only find longer paths to the goal.
            return Ok(ExplorationResult {
                success_trajectories: successes,
                failed_trajectories: failures,
                stats,
            });
        }
        live = next_live;
    }

    // Step cap reached (or all children pruned): live beams end as failures.
    for beam in live {
        let mut t = beam.trajectory;
        if t.is_empty() {
            continue;
        }
        t.terminal = Terminal::BudgetExhausted;
        t.outcome_label = Some(OutcomeLabel::Failure);
        failures.push(t);
    }
    Ok(ExplorationResult {
        success_trajectories: successes,
        failed_trajectories: failures,
        stats,
    })
}
