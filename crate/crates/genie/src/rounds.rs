//! Iterative self-improvement rounds: source tasks, explore them under
//! reward guidance, split the results into the two training sets, and hand
//! the datasets to an external fine-tune hook.
//!
//! Dual expansion conservation: every explored trajectory lands in exactly
//! one of the two datasets. Verified successes go to the agent dataset
//! verbatim; everything else goes through step labeling into the reward-model
//! dataset. Fine-tuning never happens in-process: the trainer hook receives
//! dataset paths and answers with (possibly unchanged) backend endpoint
//! descriptors. [`MemorizingPolicy`] plus [`MemorizingTrainer`] form the
//! in-process stand-in for that loop; recorded successes replay exactly, so
//! the success rate on a fixed task pool never decreases across rounds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{classify_difficulty, Action};
use crate::backend::{BackendError, PolicyBackend, PolicyProposal, RewardBackend};
use crate::explore::{explore_task, BeamConfig};
use crate::io::{write_json_pretty, IoError};
use crate::label::{exploration_samples, label_trajectory, DEFAULT_N_ROLLOUTS};
use crate::reward_data::{emit_dataset, LabelCounts, RewardDataError, RewardSample, SampleLabel};
use crate::seed::derive_seed;
use crate::session::Observation;
use crate::trajectory::{
    load_trajectories, save_trajectories, TaskInstruction, TaskSource, Trajectory,
    TrajectoryError,
};
use crate::world::SyntheticWorld;

pub const ROUND_REPORT_SCHEMA_VERSION: &str = "round_report.v1";
/// Successful trajectories, one JSON object per line.
pub const AGENT_DATASET_FILE: &str = "agent_trajectories.jsonl";
/// Reward samples plus manifest, written by `emit_dataset`.
pub const RM_DATASET_DIR: &str = "rm_dataset";
pub const ROUND_REPORT_FILE: &str = "round_report.v1.json";

/// Worlds keyed by the task_id they serve; several tasks may share one world.
pub type WorldPool = BTreeMap<String, Arc<SyntheticWorld>>;

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("invalid round configuration: {0}")]
    Config(String),
    #[error("task generator failed: {0}")]
    Generator(String),
    #[error("trainer hand-off failed: {0}")]
    Trainer(String),
    #[error(transparent)]
    Data(#[from] RewardDataError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Backend endpoint descriptors around a fine-tune hand-off; bookkeeping for
/// run manifests, never dereferenced by the engine itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerEndpoints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_endpoint_before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_endpoint_after: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rm_endpoint_before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rm_endpoint_after: Option<String>,
}

/// Configuration for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    /// 0 is the greedy baseline; improvement rounds count from 1.
    pub round_index: u32,
    /// Task sources admitted this round; every attempted task must carry one.
    pub task_sources: Vec<TaskSource>,
    /// Search parameters; its seed is the round's master seed, from which
    /// per-task seeds derive by stable hashing, so adding tasks never
    /// perturbs existing ones.
    pub exploration: BeamConfig,
    /// Continuation rollouts per step when labeling failed trajectories.
    pub n_rollouts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer_hooks: Option<TrainerEndpoints>,
    pub output_dir: PathBuf,
}

impl RoundConfig {
    pub fn new(round_index: u32, exploration: BeamConfig, output_dir: impl Into<PathBuf>) -> Self {
        let task_sources = if round_index <= 1 {
            vec![TaskSource::SeedDataset]
        } else {
            vec![
                TaskSource::SeedDataset,
                TaskSource::LlmExpansion,
                TaskSource::FailedRetry,
                TaskSource::ManualComplex,
            ]
        };
        RoundConfig {
            round_index,
            task_sources,
            exploration,
            n_rollouts: DEFAULT_N_ROLLOUTS,
            trainer_hooks: None,
            output_dir: output_dir.into(),
        }
    }

    pub fn agent_dataset_path(&self) -> PathBuf {
        self.output_dir.join(AGENT_DATASET_FILE)
    }

    pub fn rm_dataset_dir(&self) -> PathBuf {
        self.output_dir.join(RM_DATASET_DIR)
    }

    pub fn report_path(&self) -> PathBuf {
        self.output_dir.join(ROUND_REPORT_FILE)
    }

    pub fn validate(&self) -> Result<(), RoundError> {
        // Nothing has failed before round 2, so there is nothing to retry.
        if self.round_index <= 1 && self.task_sources.contains(&TaskSource::FailedRetry) {
            return Err(RoundError::Config(format!(
                "round {} cannot admit failed_retry tasks",
                self.round_index
            )));
        }
        if self.task_sources.is_empty() {
            return Err(RoundError::Config("task_sources must be nonempty".to_owned()));
        }
        if self.n_rollouts == 0 {
            return Err(RoundError::Config("n_rollouts must be positive".to_owned()));
        }
        self.exploration
            .validate()
            .map_err(|e| RoundError::Config(e.to_string()))
    }
}

/// Success rate within one difficulty bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRate {
    pub attempted: usize,
    pub succeeded: usize,
    pub rate: f64,
}

/// What one round produced; serialized as `round_report.v1.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundReport {
    pub schema_version: String,
    pub round_index: u32,
    pub tasks_attempted: usize,
    pub tasks_succeeded: usize,
    /// tasks_succeeded / tasks_attempted; 0.0 for an empty round.
    pub success_rate: f64,
    /// Tasks whose exploration or labeling hit a backend error; counted as
    /// failures, the round still completes.
    pub task_errors: usize,
    /// Verified-success trajectories added to the agent dataset.
    pub agent_dataset_delta: usize,
    /// Reward samples added, by label.
    pub rm_dataset_delta: LabelCounts,
    /// Success rates keyed by difficulty bucket; tasks without a reference
    /// length land in "unknown".
    pub per_difficulty: BTreeMap<String, DifficultyRate>,
    /// task_ids that produced no verified success, in attempt order; round 3
    /// feeds on these.
    pub carried_failures: Vec<String>,
}

fn difficulty_bucket(task: &TaskInstruction) -> String {
    match task.reference_length {
        Some(n) => classify_difficulty(n).to_string(),
        None => "unknown".to_owned(),
    }
}

struct TaskOutcome {
    succeeded: bool,
    errored: bool,
    successes: Vec<Trajectory>,
    samples: Vec<RewardSample>,
}

/// Run one round over `tasks`: explore each task, route successes to the
/// agent dataset and failures through step labeling to the reward dataset,
/// then write both datasets and the report under `cfg.output_dir`.
///
/// Per-task backend errors are tolerated: the task counts as a failure and
/// the round completes. Tasks run concurrently; all outputs are ordered by
/// the input task order (then content ids), so reports and datasets are
/// byte-reproducible for a fixed config.
pub fn run_round(
    cfg: &RoundConfig,
    tasks: &[TaskInstruction],
    worlds: &WorldPool,
    policy: &dyn PolicyBackend,
    scorer: &dyn RewardBackend,
) -> Result<RoundReport, RoundError> {
    cfg.validate()?;
    let mut ids = BTreeSet::new();
    for task in tasks {
        if !ids.insert(task.task_id.as_str()) {
            return Err(RoundError::Config(format!("duplicate task_id {}", task.task_id)));
        }
        if !cfg.task_sources.contains(&task.source) {
            return Err(RoundError::Config(format!(
                "task {} has source {:?}, not admitted this round",
                task.task_id, task.source
            )));
        }
        if !worlds.contains_key(&task.task_id) {
            return Err(RoundError::Config(format!("no world for task {}", task.task_id)));
        }
    }

    let round_tag = cfg.round_index.to_string();
    let outcomes: Vec<TaskOutcome> = tasks
        .par_iter()
        .map(|task| {
            let world = &worlds[&task.task_id];
            let mut search = cfg.exploration;
            search.seed =
                derive_seed(cfg.exploration.seed, &["round", &round_tag, &task.task_id]);
            let result = match explore_task(task, world, policy, scorer, &search) {
                Ok(result) => result,
                Err(e) => {
                    log::warn!("task {}: exploration failed: {e}", task.task_id);
                    return TaskOutcome {
                        succeeded: false,
                        errored: true,
                        successes: Vec::new(),
                        samples: Vec::new(),
                    };
                }
            };
            let mut errored = false;
            let mut samples = Vec::new();
            for failed in &result.failed_trajectories {
                let labeled = label_trajectory(
                    failed,
                    world,
                    policy,
                    scorer,
                    cfg.n_rollouts,
                    &search,
                    search.seed,
                )
                .and_then(|labels| exploration_samples(failed, &labels, search.window));
                match labeled {
                    Ok(s) => samples.extend(s),
                    Err(e) => {
                        log::warn!("task {}: labeling failed: {e}", task.task_id);
                        errored = true;
                    }
                }
            }
            TaskOutcome {
                succeeded: !result.success_trajectories.is_empty(),
                errored,
                successes: result.success_trajectories,
                samples,
            }
        })
        .collect();

    let mut agent: Vec<Trajectory> = Vec::new();
    let mut seen_trajectories = BTreeSet::new();
    let mut samples: Vec<RewardSample> = Vec::new();
    let mut seen_samples = BTreeSet::new();
    let mut carried_failures = Vec::new();
    let mut tasks_succeeded = 0usize;
    let mut task_errors = 0usize;
    let mut buckets: BTreeMap<String, (usize, usize)> = BTreeMap::new();

    for (task, outcome) in tasks.iter().zip(&outcomes) {
        let bucket = buckets.entry(difficulty_bucket(task)).or_default();
        bucket.0 += 1;
        if outcome.succeeded {
            tasks_succeeded += 1;
            bucket.1 += 1;
        } else {
            carried_failures.push(task.task_id.clone());
        }
        task_errors += usize::from(outcome.errored);
        for t in &outcome.successes {
            if seen_trajectories.insert(t.id()) {
                agent.push(t.clone());
            }
        }
        // Failures sharing a prefix can yield byte-identical samples; the
        // dataset keeps one of each.
        for s in &outcome.samples {
            if seen_samples.insert(s.sample_id.clone()) {
                samples.push(s.clone());
            }
        }
    }

    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| IoError::io(cfg.output_dir.clone(), e))?;
    save_trajectories(&cfg.agent_dataset_path(), &agent)?;
    emit_dataset(&samples, &cfg.rm_dataset_dir())?;
    let rm_dataset_delta = samples.iter().fold(LabelCounts::default(), |mut acc, s| {
        match s.label {
            SampleLabel::YPlus => acc.y_plus += 1,
            SampleLabel::YMinus => acc.y_minus += 1,
        }
        acc
    });

    let per_difficulty = buckets
        .into_iter()
        .map(|(name, (attempted, succeeded))| {
            (name, DifficultyRate { attempted, succeeded, rate: succeeded as f64 / attempted as f64 })
        })
        .collect();
    let report = RoundReport {
        schema_version: ROUND_REPORT_SCHEMA_VERSION.to_owned(),
        round_index: cfg.round_index,
        tasks_attempted: tasks.len(),
        tasks_succeeded,
        success_rate: if tasks.is_empty() {
            0.0
        } else {
            tasks_succeeded as f64 / tasks.len() as f64
        },
        task_errors,
        agent_dataset_delta: agent.len(),
        rm_dataset_delta,
        per_difficulty,
        carried_failures,
    };
    write_json_pretty(&cfg.report_path(), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Task sourcing
// ---------------------------------------------------------------------------

/// Produces novel task instructions from examples; an LLM in the full
/// pipeline, a template instantiator at desk scale. Outputs are re-tagged
/// `llm_expansion` by the caller.
pub trait TaskGeneratorHook: Send + Sync {
    fn generate(
        &self,
        round_index: u32,
        examples: &[TaskInstruction],
    ) -> Result<Vec<TaskInstruction>, RoundError>;
}

/// Source the task pool for a round: round 0 and 1 use the seed tasks as-is,
/// round 2 asks the generator hook, round 3 and later retry carried failures
/// alongside the manually crafted pool.
pub fn generate_tasks(
    round_index: u32,
    seed_tasks: &[TaskInstruction],
    generator: Option<&dyn TaskGeneratorHook>,
    failed_pool: &[TaskInstruction],
    manual_pool: &[TaskInstruction],
) -> Result<Vec<TaskInstruction>, RoundError> {
    match round_index {
        0 | 1 => Ok(seed_tasks.to_vec()),
        2 => {
            let hook = generator.ok_or_else(|| {
                RoundError::Generator("round 2 requires a task generator hook".to_owned())
            })?;
            let mut tasks = hook.generate(round_index, seed_tasks)?;
            for task in &mut tasks {
                task.source = TaskSource::LlmExpansion;
            }
            Ok(tasks)
        }
        _ => {
            let mut tasks: Vec<TaskInstruction> = failed_pool
                .iter()
                .cloned()
                .map(|mut t| {
                    t.source = TaskSource::FailedRetry;
                    t
                })
                .collect();
            tasks.extend(manual_pool.iter().cloned().map(|mut t| {
                t.source = TaskSource::ManualComplex;
                t
            }));
            Ok(tasks)
        }
    }
}

/// Template stand-in for an LLM generator: instantiates one paraphrased task
/// per world, so every output is its world's canonical goal and therefore
/// solvable by construction. Output `i` belongs to world `i`; [`Self::pool`]
/// zips them back together.
pub struct TemplateGenerator {
    worlds: Vec<Arc<SyntheticWorld>>,
}

impl TemplateGenerator {
    pub fn new(worlds: Vec<Arc<SyntheticWorld>>) -> Self {
        TemplateGenerator { worlds }
    }

    /// World pool for tasks this generator produced.
    ///
    /// # Panics
    /// Panics when `tasks` did not come from this generator unchanged.
    pub fn pool(&self, tasks: &[TaskInstruction]) -> WorldPool {
        assert_eq!(tasks.len(), self.worlds.len(), "tasks must match generator output");
        tasks
            .iter()
            .zip(&self.worlds)
            .map(|(t, w)| (t.task_id.clone(), w.clone()))
            .collect()
    }
}

impl TaskGeneratorHook for TemplateGenerator {
    fn generate(
        &self,
        round_index: u32,
        _examples: &[TaskInstruction],
    ) -> Result<Vec<TaskInstruction>, RoundError> {
        Ok(self
            .worlds
            .iter()
            .enumerate()
            .map(|(i, world)| {
                let mut task =
                    TaskInstruction::for_world(world, format!("gen_r{round_index}_{i:03}"));
                task.goal_text = format!("Here is your next assignment: {}", task.goal_text);
                task
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Fine-tune hand-off
// ---------------------------------------------------------------------------

/// What the trainer hook receives: paths to the round's emitted datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerRequest {
    pub agent_dataset_path: PathBuf,
    pub rm_dataset_path: PathBuf,
    pub round_index: u32,
}

/// What the trainer hook returns: new endpoint descriptors, `None` meaning
/// the backend is unchanged.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerOutcome {
    pub policy_endpoint: Option<String>,
    pub scorer_endpoint: Option<String>,
}

/// External fine-tuning boundary. Implementations may shell out, call a
/// service, or mutate an in-process stub; the engine only blocks on the
/// result.
pub trait TrainerHook: Send + Sync {
    fn finetune(&self, request: &TrainerRequest) -> Result<TrainerOutcome, RoundError>;
}

/// No-op hand-off: endpoints unchanged.
pub struct IdentityTrainer;

impl TrainerHook for IdentityTrainer {
    fn finetune(&self, _request: &TrainerRequest) -> Result<TrainerOutcome, RoundError> {
        Ok(TrainerOutcome::default())
    }
}

/// Hand the round's datasets to the trainer and block until it answers.
pub fn handoff_finetune(
    request: &TrainerRequest,
    hook: &dyn TrainerHook,
) -> Result<TrainerOutcome, RoundError> {
    for path in [&request.agent_dataset_path, &request.rm_dataset_path] {
        if !path.exists() {
            return Err(RoundError::Trainer(format!(
                "dataset missing before hand-off: {}",
                path.display()
            )));
        }
    }
    hook.finetune(request)
}

// ---------------------------------------------------------------------------
// Memorizing stub trainer
// ---------------------------------------------------------------------------

/// Lookup key: goal text, step index, and the pre-action screenshot digest.
/// Digests are world-salted, so one table serves many worlds without
/// collisions; the index keeps repeated states (waits) from looping.
pub type MemoryTable = BTreeMap<(String, usize, String), Action>;

/// Policy wrapper that replays memorized steps and falls back to the inner
/// policy everywhere else. Shares its table with [`MemorizingTrainer`]: the
/// desk-scale stand-in for fine-tuning on collected successes.
pub struct MemorizingPolicy<P> {
    inner: P,
    table: Arc<RwLock<MemoryTable>>,
}

impl<P> MemorizingPolicy<P> {
    pub fn new(inner: P) -> Self {
        MemorizingPolicy { inner, table: Arc::new(RwLock::new(MemoryTable::new())) }
    }

    /// Wrap a different inner policy around an existing table.
    pub fn with_table(inner: P, table: Arc<RwLock<MemoryTable>>) -> Self {
        MemorizingPolicy { inner, table }
    }

    pub fn table(&self) -> Arc<RwLock<MemoryTable>> {
        self.table.clone()
    }

    pub fn memorized_len(&self) -> usize {
        self.table.read().expect("table lock").len()
    }
}

impl<P: PolicyBackend> PolicyBackend for MemorizingPolicy<P> {
    fn propose(
        &self,
        goal: &str,
        observation: &Observation,
        history_summaries: &[String],
        k: usize,
    ) -> Result<PolicyProposal, BackendError> {
        let key =
            (goal.to_owned(), history_summaries.len(), observation.screenshot.digest.clone());
        if let Some(action) = self.table.read().expect("table lock").get(&key) {
            return Ok(PolicyProposal::from_candidates(vec![action.clone()], k));
        }
        self.inner.propose(goal, observation, history_summaries, k)
    }
}

/// Records every step of the agent dataset's trajectories into the shared
/// lookup table. Endpoints stay unchanged; the "training" is the table.
pub struct MemorizingTrainer {
    table: Arc<RwLock<MemoryTable>>,
}

impl MemorizingTrainer {
    pub fn new(table: Arc<RwLock<MemoryTable>>) -> Self {
        MemorizingTrainer { table }
    }

    pub fn for_policy<P>(policy: &MemorizingPolicy<P>) -> Self {
        MemorizingTrainer { table: policy.table() }
    }
}

impl TrainerHook for MemorizingTrainer {
    fn finetune(&self, request: &TrainerRequest) -> Result<TrainerOutcome, RoundError> {
        let trajectories = load_trajectories(&request.agent_dataset_path)?;
        let mut table = self.table.write().expect("table lock");
        for t in &trajectories {
            for (i, step) in t.steps.iter().enumerate() {
                table.insert(
                    (t.task.goal_text.clone(), i, step.observation.screenshot.digest.clone()),
                    step.action.clone(),
                );
            }
        }
        Ok(TrainerOutcome::default())
    }
}
