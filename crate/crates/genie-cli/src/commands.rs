//! Subcommand implementations. Each command resolves its effective config
//! (flags + config file + environment), validates it, loads inputs, computes,
//! and only then writes artifacts plus `run_manifest.json`, so a config error
//! never leaves partial outputs. Artifacts are byte-deterministic for a
//! given effective config.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genie::action::NormalizedEquality;
use genie::backend::{build_reward_query, DEFAULT_K_CANDIDATES, DEFAULT_WINDOW};
use genie::eval::{
    best_of_n, build_rm_benchmark, eval_reward_model, read_rm_benchmark, write_rm_benchmark,
    BenchmarkSizes, F1_REPORT_FILE, RM_BENCHMARK_FILE, SCALING_REPORT_FILE,
};
use genie::explore::{explore_task, Aggregation, BeamConfig, ExploreStats};
use genie::io::{read_jsonl, write_json_pretty};
use genie::label::{
    exploration_samples, label_trajectory, label_trajectory_exhaustive, write_step_labels,
    DEFAULT_N_ROLLOUTS,
};
use genie::reward_data::{
    corrupt_trajectory, emit_dataset, gen_rule_verified_samples, ground_truth_for_trajectory,
    mine_hard_negatives, read_dataset, write_ground_truth, CorruptionMode, DatasetManifest,
    RewardDataError, RewardSample, SampleLabel, SampleSource,
};
use genie::rounds::{handoff_finetune, run_round, RoundConfig, TrainerRequest};
use genie::seed::derive_seed;
use genie::trajectory::{load_trajectories, save_trajectories, TaskInstruction};
use genie::world::{generate_world, SyntheticWorld};
use serde::{Deserialize, Serialize};

use crate::backend::{BackendArgs, BackendSpec, Backends};
use crate::error::CliError;
use crate::manifest;
use crate::trainer::TrainerSpec;

pub const EXPLORATION_REPORT_FILE: &str = "exploration_report.json";
pub const STEP_LABELS_FILE: &str = "step_labels.v1.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.v1.jsonl";
pub const TRAINER_OUTCOME_FILE: &str = "trainer_outcome.json";
pub const SELFIMPROVE_SCHEMA_VERSION: &str = "selfimprove.v1";

#[derive(Parser)]
#[command(
    name = "genie",
    version,
    about = "Reproducible batch commands over the genie engine."
)]
pub struct Cli {
    /// Cap worker parallelism (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic world.
    GenWorld(GenWorldArgs),
    /// Reward-guided beam-search exploration over a task file.
    Explore(ExploreArgs),
    /// Label trajectory steps by continuation rollouts (or exhaustively).
    Label(LabelArgs),
    /// Build a reward-model dataset from annotated reference trajectories.
    GenRewardData(GenRewardDataArgs),
    /// Run one self-improvement round from a config file.
    Selfimprove(SelfimproveArgs),
    /// Score a reward model on a paired benchmark and report F1.
    EvalRm(EvalRmArgs),
    /// Measure best-of-N test-time scaling on a benchmark.
    Bestofn(BestofnArgs),
    /// Merge reward datasets into one, verifying manifests.
    Export(ExportArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenWorld(args) => gen_world(args),
        Command::Explore(args) => explore(args),
        Command::Label(args) => label(args),
        Command::GenRewardData(args) => gen_reward_data(args),
        Command::Selfimprove(args) => selfimprove(args),
        Command::EvalRm(args) => eval_rm(args),
        Command::Bestofn(args) => bestofn(args),
        Command::Export(args) => export(args),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Corruption modes by flag name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Truncation,
    Substitution,
    Continuation,
}

impl ModeArg {
    fn mode(self) -> CorruptionMode {
        match self {
            ModeArg::Truncation => CorruptionMode::EarlyTruncation { keep: None },
            ModeArg::Substitution => CorruptionMode::CrossTaskSubstitution { splice: None },
            ModeArg::Continuation => CorruptionMode::RedundantContinuation { extra_steps: None },
        }
    }

    fn name(self) -> &'static str {
        match self {
            ModeArg::Truncation => "truncation",
            ModeArg::Substitution => "substitution",
            ModeArg::Continuation => "continuation",
        }
    }
}

fn load_world(path: &Path) -> Result<Arc<SyntheticWorld>, CliError> {
    Ok(Arc::new(SyntheticWorld::load(path)?))
}

/// Load world files, collapsing duplicates by world id.
fn load_worlds(paths: &[PathBuf]) -> Result<Vec<Arc<SyntheticWorld>>, CliError> {
    let mut by_id: BTreeMap<String, Arc<SyntheticWorld>> = BTreeMap::new();
    for path in paths {
        let world = load_world(path)?;
        by_id.entry(world.world_id()).or_insert(world);
    }
    Ok(by_id.into_values().collect())
}

fn world_index(worlds: &[Arc<SyntheticWorld>]) -> BTreeMap<String, Arc<SyntheticWorld>> {
    worlds.iter().map(|w| (w.world_id(), w.clone())).collect()
}

fn require_positive(name: &str, value: usize) -> Result<(), CliError> {
    if value == 0 {
        return Err(CliError::Config(format!("{name} must be positive")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-world
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenWorldArgs {
    /// Clicks from the entry screen to the goal screen.
    #[arg(long)]
    pub depth: u32,
    /// Interactive elements per screen.
    #[arg(long, default_value_t = 2)]
    pub branching: u32,
    /// Modal trap screens reachable from the chain.
    #[arg(long, default_value_t = 1)]
    pub distractors: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output world file.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Serialize)]
struct GenWorldRunConfig<'a> {
    depth: u32,
    branching: u32,
    distractors: u32,
    seed: u64,
    output: &'a Path,
}

fn gen_world(args: GenWorldArgs) -> Result<(), CliError> {
    require_positive("--depth", args.depth as usize)?;
    require_positive("--branching", args.branching as usize)?;
    let config = GenWorldRunConfig {
        depth: args.depth,
        branching: args.branching,
        distractors: args.distractors,
        seed: args.seed,
        output: &args.output,
    };
    let world = generate_world(args.depth, args.branching, args.distractors, args.seed);
    world.save(&args.output)?;
    let dir = args.output.parent().unwrap_or_else(|| Path::new("."));
    manifest::write(dir, "gen-world", &config, Some(args.seed))
}

// ---------------------------------------------------------------------------
// explore
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ExploreArgs {
    /// Task file: one task instruction JSON per line.
    #[arg(long)]
    pub tasks: PathBuf,
    /// World file the tasks run in.
    #[arg(long)]
    pub world: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Candidates proposed per beam per step.
    #[arg(long, default_value_t = DEFAULT_K_CANDIDATES)]
    pub k: usize,
    /// Beams kept after each pruning pass.
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Step cap per trajectory (default: the world's budget).
    #[arg(long)]
    pub max_steps: Option<u32>,
    /// Screenshots per reward query.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct ExploreRunConfig<'a> {
    tasks: &'a Path,
    world: &'a Path,
    backend: &'a BackendSpec,
    beam: BeamConfig,
    out_dir: &'a Path,
}

#[derive(Serialize)]
struct TaskReport {
    success: bool,
    successes: u64,
    failures: u64,
    stats: ExploreStats,
}

#[derive(Serialize)]
struct ExplorationReport {
    schema_version: &'static str,
    tasks_attempted: u64,
    tasks_succeeded: u64,
    success_rate: f64,
    tasks: BTreeMap<String, TaskReport>,
}

fn explore(args: ExploreArgs) -> Result<(), CliError> {
    let spec = args.backend.resolve()?;
    let world = load_world(&args.world)?;
    let tasks: Vec<TaskInstruction> = read_jsonl(&args.tasks)?;
    let mut ids = BTreeSet::new();
    for task in &tasks {
        if !ids.insert(task.task_id.as_str()) {
            return Err(CliError::Data(format!("duplicate task id {}", task.task_id)));
        }
    }
    let beam = BeamConfig {
        k_candidates: args.k,
        beam_width: args.beam,
        max_steps: args.max_steps.unwrap_or(world.max_steps),
        outcome_threshold: spec.theta(),
        aggregation: Aggregation::Sum,
        window: args.window,
        seed: args.seed,
    };
    beam.validate()?;
    let config = ExploreRunConfig {
        tasks: &args.tasks,
        world: &args.world,
        backend: &spec,
        beam,
        out_dir: &args.out_dir,
    };
    let backends = Backends::build(&spec, std::slice::from_ref(&world), args.seed)?;

    let mut successes = Vec::new();
    let mut failures = Vec::new();
    let mut reports = BTreeMap::new();
    let mut succeeded = 0u64;
    for task in &tasks {
        // Per-task seeds, so adding tasks never perturbs existing ones.
        let mut task_cfg = beam;
        task_cfg.seed = derive_seed(args.seed, &["task", &task.task_id]);
        let result = explore_task(task, &world, backends.policy(), backends.scorer(), &task_cfg)?;
        let success = !result.success_trajectories.is_empty();
        succeeded += u64::from(success);
        reports.insert(
            task.task_id.clone(),
            TaskReport {
                success,
                successes: result.success_trajectories.len() as u64,
                failures: result.failed_trajectories.len() as u64,
                stats: result.stats,
            },
        );
        successes.extend(result.success_trajectories);
        failures.extend(result.failed_trajectories);
    }
    let attempted = tasks.len() as u64;
    let report = ExplorationReport {
        schema_version: "exploration_report.v1",
        tasks_attempted: attempted,
        tasks_succeeded: succeeded,
        success_rate: if attempted == 0 { 0.0 } else { succeeded as f64 / attempted as f64 },
        tasks: reports,
    };

    save_trajectories(&args.out_dir.join("successes.jsonl"), &successes)?;
    save_trajectories(&args.out_dir.join("failures.jsonl"), &failures)?;
    write_json_pretty(&args.out_dir.join(EXPLORATION_REPORT_FILE), &report)?;
    manifest::write(&args.out_dir, "explore", &config, Some(args.seed))
}

// ---------------------------------------------------------------------------
// label
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct LabelArgs {
    /// Trajectories to label, with outcome labels set.
    #[arg(long)]
    pub trajectories: PathBuf,
    /// World file the trajectories ran in.
    #[arg(long)]
    pub world: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Continuation rollouts per step of a failed trajectory.
    #[arg(long, default_value_t = DEFAULT_N_ROLLOUTS)]
    pub rollouts: u32,
    /// Screenshots per reward query.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Label by exhaustive reachability instead of sampled rollouts; no
    /// backend is queried.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct LabelRunConfig<'a> {
    trajectories: &'a Path,
    world: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend: Option<&'a BackendSpec>,
    rollouts: u32,
    window: usize,
    exhaustive: bool,
    seed: u64,
    out_dir: &'a Path,
}

#[derive(Serialize)]
struct LabelReport {
    schema_version: &'static str,
    trajectories: u64,
    steps_labeled: u64,
    dataset: DatasetManifest,
}

fn label(args: LabelArgs) -> Result<(), CliError> {
    require_positive("--rollouts", args.rollouts as usize)?;
    let spec = if args.exhaustive { None } else { Some(args.backend.resolve()?) };
    let world = load_world(&args.world)?;
    let trajectories = load_trajectories(&args.trajectories)?;
    let mut beam = BeamConfig::for_world(&world, args.seed);
    beam.window = args.window;
    let config = LabelRunConfig {
        trajectories: &args.trajectories,
        world: &args.world,
        backend: spec.as_ref(),
        rollouts: args.rollouts,
        window: args.window,
        exhaustive: args.exhaustive,
        seed: args.seed,
        out_dir: &args.out_dir,
    };
    let backends = spec
        .as_ref()
        .map(|s| Backends::build(s, std::slice::from_ref(&world), args.seed))
        .transpose()?;

    let mut all_labels = Vec::new();
    let mut samples: BTreeMap<String, RewardSample> = BTreeMap::new();
    for t in &trajectories {
        let labels = match &backends {
            None => label_trajectory_exhaustive(t, &world)?,
            Some(b) => label_trajectory(
                t,
                &world,
                b.policy(),
                b.scorer(),
                args.rollouts,
                &beam,
                derive_seed(args.seed, &["label", &t.id()]),
            )?,
        };
        for sample in exploration_samples(t, &labels, args.window)? {
            samples.entry(sample.sample_id.clone()).or_insert(sample);
        }
        all_labels.extend(labels);
    }

    write_step_labels(&all_labels, &args.out_dir.join(STEP_LABELS_FILE))?;
    let flat: Vec<RewardSample> = samples.into_values().collect();
    let dataset = emit_dataset(&flat, &args.out_dir.join("rm_dataset"))?;
    let report = LabelReport {
        schema_version: "label_report.v1",
        trajectories: trajectories.len() as u64,
        steps_labeled: all_labels.len() as u64,
        dataset,
    };
    write_json_pretty(&args.out_dir.join("label_report.json"), &report)?;
    manifest::write(&args.out_dir, "label", &config, Some(args.seed))
}

// ---------------------------------------------------------------------------
// gen-reward-data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenRewardDataArgs {
    /// Annotated reference trajectories (verified successes).
    #[arg(long)]
    pub trajectories: PathBuf,
    /// World files for corruption re-execution and oracle backends.
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub worlds: Vec<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Screenshots per reward query.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Corruption modes to apply (default: all three).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub modes: Option<Vec<ModeArg>>,
    /// Corruption passes per source trajectory.
    #[arg(long, default_value_t = 1)]
    pub per_trajectory: u32,
    /// Keep only the negatives the scorer misclassifies, appended as
    /// hard-negative samples.
    #[arg(long)]
    pub mine: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct GenRewardDataRunConfig<'a> {
    trajectories: &'a Path,
    worlds: &'a [PathBuf],
    backend: &'a BackendSpec,
    window: usize,
    modes: Vec<&'static str>,
    per_trajectory: u32,
    mine: bool,
    seed: u64,
    out_dir: &'a Path,
}

#[derive(Serialize)]
struct GenRewardDataReport {
    schema_version: &'static str,
    rule_samples: u64,
    rule_skipped_steps: u64,
    corruption_samples: u64,
    mined_hard_negatives: u64,
    dataset: DatasetManifest,
}

fn gen_reward_data(args: GenRewardDataArgs) -> Result<(), CliError> {
    require_positive("--per-trajectory", args.per_trajectory as usize)?;
    let modes = args.modes.clone().unwrap_or_else(|| {
        vec![ModeArg::Truncation, ModeArg::Substitution, ModeArg::Continuation]
    });
    if modes.is_empty() {
        return Err(CliError::Config("--modes must name at least one mode".to_owned()));
    }
    let spec = args.backend.resolve()?;
    let worlds = load_worlds(&args.worlds)?;
    let by_id = world_index(&worlds);
    let trajectories = load_trajectories(&args.trajectories)?;
    let config = GenRewardDataRunConfig {
        trajectories: &args.trajectories,
        worlds: &args.worlds,
        backend: &spec,
        window: args.window,
        modes: modes.iter().map(|m| m.name()).collect(),
        per_trajectory: args.per_trajectory,
        mine: args.mine,
        seed: args.seed,
        out_dir: &args.out_dir,
    };
    let backends = Backends::build(&spec, &worlds, args.seed)?;

    let truths: Vec<_> = trajectories.iter().map(ground_truth_for_trajectory).collect();
    let rule = gen_rule_verified_samples(
        backends.policy(),
        &truths,
        &NormalizedEquality,
        args.window,
        derive_seed(args.seed, &["rule"]),
    )?;

    // Corrupted variants become outcome-level negatives: the claim of a
    // re-executed corruption, judged against what really happened.
    let mut corruption = Vec::new();
    let mut seen = BTreeSet::new();
    for pass in 0..args.per_trajectory {
        let pass_tag = pass.to_string();
        for t in &trajectories {
            let Some(world) = by_id.get(&t.world_id) else {
                log::warn!("no world {} for task {}; skipping corruption", t.world_id, t.task.task_id);
                continue;
            };
            for mode in &modes {
                let corruption_seed = derive_seed(
                    args.seed,
                    &["corrupt", &pass_tag, &t.task.task_id, mode.name()],
                );
                let corrupted =
                    match corrupt_trajectory(t, world, mode.mode(), &trajectories, corruption_seed)
                    {
                        Ok(c) => c,
                        Err(RewardDataError::InvalidCorruption(_)) => continue,
                        Err(e) => return Err(e.into()),
                    };
                let claim = corrupted.steps[corrupted.len() - 1].action.clone();
                let query = build_reward_query(
                    &t.task.goal_text,
                    &corrupted.prefix(corrupted.len() - 1),
                    claim,
                    args.window,
                );
                // Different passes can corrupt to the same result; keep one.
                if !seen.insert(query.identity()) {
                    continue;
                }
                corruption.push(RewardSample::new(
                    query,
                    SampleLabel::YMinus,
                    SampleSource::Corruption,
                    &[&t.task.task_id, "corruption", mode.name(), &pass_tag],
                ));
            }
        }
    }

    let mut samples: Vec<RewardSample> = rule.samples;
    samples.extend(corruption.iter().cloned());
    let mined = if args.mine {
        let negatives: Vec<RewardSample> = samples
            .iter()
            .filter(|s| s.label == SampleLabel::YMinus)
            .cloned()
            .collect();
        mine_hard_negatives(backends.scorer(), &negatives)?
    } else {
        Vec::new()
    };
    let mined_count = mined.len() as u64;
    samples.extend(mined);

    let dataset = emit_dataset(&samples, &args.out_dir)?;
    write_ground_truth(&truths, &args.out_dir.join(GROUND_TRUTH_FILE))?;
    let report = GenRewardDataReport {
        schema_version: "reward_data_report.v1",
        rule_samples: dataset.total - corruption.len() as u64 - mined_count,
        rule_skipped_steps: rule.skipped_steps,
        corruption_samples: corruption.len() as u64,
        mined_hard_negatives: mined_count,
        dataset,
    };
    write_json_pretty(&args.out_dir.join("reward_data_report.json"), &report)?;
    manifest::write(&args.out_dir, "gen-reward-data", &config, Some(args.seed))
}

// ---------------------------------------------------------------------------
// selfimprove
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SelfimproveArgs {
    /// Round config file.
    #[arg(long)]
    pub config: PathBuf,
}

/// One task and the world file it runs in; `bindings` is a JSONL of these.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskBinding {
    task: TaskInstruction,
    world: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelfImproveConfig {
    schema_version: String,
    round: RoundConfig,
    /// Task-to-world bindings, one JSON object per line.
    bindings: PathBuf,
    backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainer: Option<TrainerSpec>,
}

fn selfimprove(args: SelfimproveArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg: SelfImproveConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", args.config.display())))?;
    if cfg.schema_version != SELFIMPROVE_SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "unsupported config schema `{}`, expected `{}`",
            cfg.schema_version, SELFIMPROVE_SCHEMA_VERSION
        )));
    }
    cfg.backend = cfg.backend.resolve()?;
    cfg.round.validate()?;

    let bindings: Vec<TaskBinding> = read_jsonl(&cfg.bindings)?;
    let mut world_cache: BTreeMap<PathBuf, Arc<SyntheticWorld>> = BTreeMap::new();
    let mut tasks = Vec::with_capacity(bindings.len());
    let mut pool = BTreeMap::new();
    for binding in &bindings {
        let world = match world_cache.get(&binding.world) {
            Some(w) => w.clone(),
            None => {
                let w = load_world(&binding.world)?;
                world_cache.insert(binding.world.clone(), w.clone());
                w
            }
        };
        pool.insert(binding.task.task_id.clone(), world);
        tasks.push(binding.task.clone());
    }
    let unique_worlds: Vec<Arc<SyntheticWorld>> =
        world_index(&world_cache.values().cloned().collect::<Vec<_>>()).into_values().collect();
    let backends = Backends::build(&cfg.backend, &unique_worlds, cfg.round.exploration.seed)?;

    run_round(&cfg.round, &tasks, &pool, backends.policy(), backends.scorer())?;

    if let Some(trainer) = &cfg.trainer {
        let request = TrainerRequest {
            agent_dataset_path: cfg.round.agent_dataset_path(),
            rm_dataset_path: cfg.round.rm_dataset_dir(),
            round_index: cfg.round.round_index,
        };
        let outcome = handoff_finetune(&request, trainer.hook().as_ref())?;
        write_json_pretty(&cfg.round.output_dir.join(TRAINER_OUTCOME_FILE), &outcome)?;
    }
    manifest::write(
        &cfg.round.output_dir,
        "selfimprove",
        &cfg,
        Some(cfg.round.exploration.seed),
    )
}

// ---------------------------------------------------------------------------
// eval-rm
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalRmArgs {
    /// Score an existing benchmark file.
    #[arg(long, conflicts_with_all = ["trajectories", "step_pairs", "outcome_pairs"])]
    pub benchmark: Option<PathBuf>,
    /// Build the benchmark from these reference trajectories first.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// World files (required to build, and for oracle backends).
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub worlds: Vec<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Step pairs to build.
    #[arg(long)]
    pub step_pairs: Option<usize>,
    /// Outcome pairs to build.
    #[arg(long)]
    pub outcome_pairs: Option<usize>,
    /// Corruption modes for built outcome negatives (default:
    /// truncation,substitution).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub modes: Option<Vec<ModeArg>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct EvalRmRunConfig<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    benchmark: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectories: Option<&'a Path>,
    worlds: &'a [PathBuf],
    backend: &'a BackendSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    step_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outcome_pairs: Option<usize>,
    modes: Vec<&'static str>,
    seed: u64,
    out_dir: &'a Path,
}

fn eval_rm(args: EvalRmArgs) -> Result<(), CliError> {
    let spec = args.backend.resolve()?;
    let building = args.benchmark.is_none();
    if building && (args.trajectories.is_none() || args.step_pairs.is_none() || args.outcome_pairs.is_none())
    {
        return Err(CliError::Config(
            "need --benchmark, or --trajectories with --step-pairs and --outcome-pairs".to_owned(),
        ));
    }
    let modes =
        args.modes.clone().unwrap_or_else(|| vec![ModeArg::Truncation, ModeArg::Substitution]);
    if building && modes.is_empty() {
        return Err(CliError::Config("--modes must name at least one mode".to_owned()));
    }
    if building && args.worlds.is_empty() {
        return Err(CliError::Config("building a benchmark needs --worlds".to_owned()));
    }
    let worlds = load_worlds(&args.worlds)?;
    let config = EvalRmRunConfig {
        benchmark: args.benchmark.as_deref(),
        trajectories: args.trajectories.as_deref(),
        worlds: &args.worlds,
        backend: &spec,
        step_pairs: args.step_pairs,
        outcome_pairs: args.outcome_pairs,
        modes: if building { modes.iter().map(|m| m.name()).collect() } else { Vec::new() },
        seed: args.seed,
        out_dir: &args.out_dir,
    };
    let backends = Backends::build(&spec, &worlds, args.seed)?;

    let (bench, built) = match &args.benchmark {
        Some(path) => (read_rm_benchmark(path)?, false),
        None => {
            let trajectories = load_trajectories(args.trajectories.as_ref().expect("validated"))?;
            let corruption_modes: Vec<CorruptionMode> = modes.iter().map(|m| m.mode()).collect();
            let sizes = BenchmarkSizes {
                step: args.step_pairs.expect("validated"),
                outcome: args.outcome_pairs.expect("validated"),
            };
            let bench = build_rm_benchmark(
                &trajectories,
                &world_index(&worlds),
                backends.policy(),
                &NormalizedEquality,
                &corruption_modes,
                sizes,
                args.seed,
            )?;
            (bench, true)
        }
    };
    let report = eval_reward_model(backends.scorer(), &bench, spec.theta())?;

    if built {
        write_rm_benchmark(&bench, &args.out_dir.join(RM_BENCHMARK_FILE))?;
    }
    write_json_pretty(&args.out_dir.join(F1_REPORT_FILE), &report)?;
    manifest::write(&args.out_dir, "eval-rm", &config, Some(args.seed))
}

// ---------------------------------------------------------------------------
// bestofn
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct BestofnArgs {
    /// Benchmark whose step pairs define the evaluation states.
    #[arg(long)]
    pub benchmark: PathBuf,
    /// World files (for oracle backends).
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub worlds: Vec<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Candidate budgets to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct BestofnRunConfig<'a> {
    benchmark: &'a Path,
    worlds: &'a [PathBuf],
    backend: &'a BackendSpec,
    n: &'a [usize],
    seed: u64,
    out_dir: &'a Path,
}

fn bestofn(args: BestofnArgs) -> Result<(), CliError> {
    let spec = args.backend.resolve()?;
    if args.n.is_empty() || args.n.iter().any(|&n| n == 0) {
        return Err(CliError::Config("--n must list positive candidate budgets".to_owned()));
    }
    let worlds = load_worlds(&args.worlds)?;
    let config = BestofnRunConfig {
        benchmark: &args.benchmark,
        worlds: &args.worlds,
        backend: &spec,
        n: &args.n,
        seed: args.seed,
        out_dir: &args.out_dir,
    };
    let backends = Backends::build(&spec, &worlds, args.seed)?;
    let bench = read_rm_benchmark(&args.benchmark)?;
    let report = best_of_n(
        backends.policy(),
        backends.scorer(),
        &bench,
        &NormalizedEquality,
        &args.n,
        args.seed,
    )?;
    write_json_pretty(&args.out_dir.join(SCALING_REPORT_FILE), &report)?;
    manifest::write(&args.out_dir, "bestofn", &config, Some(args.seed))
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ExportArgs {
    /// Dataset directories to merge.
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct ExportRunConfig<'a> {
    datasets: &'a [PathBuf],
    out_dir: &'a Path,
}

fn export(args: ExportArgs) -> Result<(), CliError> {
    let config = ExportRunConfig { datasets: &args.datasets, out_dir: &args.out_dir };
    let mut merged: BTreeMap<String, RewardSample> = BTreeMap::new();
    for dir in &args.datasets {
        for sample in read_dataset(dir)? {
            match merged.get(&sample.sample_id) {
                None => {
                    merged.insert(sample.sample_id.clone(), sample);
                }
                Some(existing) if *existing == sample => {}
                Some(_) => {
                    return Err(CliError::Data(format!(
                        "sample id {} appears with different contents",
                        sample.sample_id
                    )));
                }
            }
        }
    }
    let flat: Vec<RewardSample> = merged.into_values().collect();
    emit_dataset(&flat, &args.out_dir)?;
    manifest::write(&args.out_dir, "export", &config, None)
}
