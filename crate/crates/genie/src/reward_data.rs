//! Reward-model training data: rule-verified samples, trajectory corruption,
//! and hard-negative mining, plus versioned dataset emission.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{
    serialize_action, Action, GroundTruthAction, Label, TerminateStatus, TextEquivalence,
    verify_action,
};
use crate::backend::{build_reward_query, BackendError, PolicyBackend, RewardBackend, RewardQuery};
use crate::io::{atomic_write, read_json, read_jsonl, write_json_pretty, write_jsonl, IoError};
use crate::seed::derive_seed;
use crate::session::reset;
use crate::trajectory::{OutcomeLabel, TaskInstruction, TaskSource, Trajectory, TrajectoryError};
use crate::world::SyntheticWorld;

pub const REWARD_SAMPLES_SCHEMA_VERSION: &str = "reward_samples.v1";
pub const GROUND_TRUTH_SCHEMA_VERSION: &str = "ground_truth.v1";

/// Training label of a sample: whether the candidate is a correct step or a
/// truthful completion claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleLabel {
    YPlus,
    YMinus,
}

impl SampleLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleLabel::YPlus => "y_plus",
            SampleLabel::YMinus => "y_minus",
        }
    }
}

/// Step-level (next-action) or outcome-level (completion) sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Step,
    Outcome,
}

/// Which generation strategy produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    RuleVerification,
    Corruption,
    HardNegative,
    Exploration,
}

impl SampleSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleSource::RuleVerification => "rule_verification",
            SampleSource::Corruption => "corruption",
            SampleSource::HardNegative => "hard_negative",
            SampleSource::Exploration => "exploration",
        }
    }
}

/// One reward-model training example. Granularity is derived from the
/// candidate kind at construction: outcome ⟺ the candidate is `terminate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardSampleRepr")]
pub struct RewardSample {
    pub query: RewardQuery,
    pub label: SampleLabel,
    pub granularity: Granularity,
    pub source: SampleSource,
    pub sample_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardSampleRepr {
    query: RewardQuery,
    label: SampleLabel,
    granularity: Granularity,
    source: SampleSource,
    sample_id: String,
}

impl TryFrom<RewardSampleRepr> for RewardSample {
    type Error = String;

    fn try_from(r: RewardSampleRepr) -> Result<Self, String> {
        let expected = granularity_of(&r.query);
        if r.granularity != expected {
            return Err(format!(
                "granularity {:?} does not match the candidate kind",
                r.granularity
            ));
        }
        if r.sample_id.is_empty() {
            return Err("sample_id must be nonempty".to_owned());
        }
        Ok(RewardSample {
            query: r.query,
            label: r.label,
            granularity: r.granularity,
            source: r.source,
            sample_id: r.sample_id,
        })
    }
}

fn granularity_of(query: &RewardQuery) -> Granularity {
    if query.is_outcome() {
        Granularity::Outcome
    } else {
        Granularity::Step
    }
}

impl RewardSample {
    /// Build a sample; the id hashes source, label, the caller's salt parts,
    /// and the query identity, so distinct provenance yields distinct ids.
    pub fn new(query: RewardQuery, label: SampleLabel, source: SampleSource, salt: &[&str]) -> Self {
        let mut hasher = Sha256::new();
        for part in [source.as_str(), label.as_str()]
            .into_iter()
            .chain(salt.iter().copied())
            .chain([query.identity().as_str()])
        {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        let sample_id = crate::world::hex(&hasher.finalize());
        RewardSample { granularity: granularity_of(&query), query, label, source, sample_id }
    }
}

#[derive(Debug, Error)]
pub enum RewardDataError {
    /// The requested corruption cannot be applied to this trajectory.
    #[error("invalid corruption: {0}")]
    InvalidCorruption(String),
    /// An operation's input contract was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("duplicate sample id {0}")]
    DuplicateSample(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

// ---------------------------------------------------------------------------
// Rule-verified sample generation
// ---------------------------------------------------------------------------

/// A reference trajectory with a per-step ground-truth answer. `truths[i]`
/// is the reference for `trajectory.steps[i]`; `None` marks unannotated
/// steps, which generation skips with a counted warning.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthTask {
    pub schema_version: String,
    pub trajectory: Trajectory,
    pub truths: Vec<Option<GroundTruthAction>>,
}

impl GroundTruthTask {
    pub fn new(trajectory: Trajectory, truths: Vec<Option<GroundTruthAction>>) -> Self {
        assert_eq!(truths.len(), trajectory.len(), "one truth slot per step");
        GroundTruthTask {
            schema_version: GROUND_TRUTH_SCHEMA_VERSION.to_owned(),
            trajectory,
            truths,
        }
    }

    pub fn validate(&self) -> Result<(), RewardDataError> {
        if self.schema_version != GROUND_TRUTH_SCHEMA_VERSION {
            return Err(RewardDataError::Precondition(format!(
                "unsupported ground truth schema {}",
                self.schema_version
            )));
        }
        if self.truths.len() != self.trajectory.len() {
            return Err(RewardDataError::Precondition(
                "truth count differs from step count".to_owned(),
            ));
        }
        Ok(())
    }
}

/// Derive per-step ground truth from a recorded trajectory: each step's
/// answer is the executed action, with the bbox of the touched element read
/// off the step's own screenshot annotations.
pub fn ground_truth_for_trajectory(trajectory: &Trajectory) -> GroundTruthTask {
    let truths = trajectory
        .steps
        .iter()
        .map(|step| {
            let som_map = step.observation.som_map();
            let bbox = match step.action.target() {
                Some(crate::action::Target::Coordinate { x, y }) => {
                    som_map.values().find(|b| b.contains(x, y)).copied()
                }
                Some(crate::action::Target::Som { index }) => som_map.get(&index).copied(),
                None => None,
            };
            Some(GroundTruthAction::from_action(&step.action, bbox))
        })
        .collect();
    GroundTruthTask::new(trajectory.clone(), truths)
}

pub fn write_ground_truth(tasks: &[GroundTruthTask], path: &Path) -> Result<(), RewardDataError> {
    write_jsonl(path, tasks)?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthTask>, RewardDataError> {
    let tasks: Vec<GroundTruthTask> = read_jsonl(path)?;
    for task in &tasks {
        task.validate()?;
    }
    Ok(tasks)
}

/// Rule-verified generation output: the samples plus how many steps were
/// skipped for missing or unverifiable ground truth.
#[derive(Debug)]
pub struct RuleVerifiedReport {
    pub samples: Vec<RewardSample>,
    pub skipped_steps: u64,
}

/// Sample one policy prediction per annotated step and label it by rule
/// verification against the step's ground truth. The query context is the
/// reference prefix, so positives and negatives share contexts.
pub fn gen_rule_verified_samples(
    policy: &dyn PolicyBackend,
    tasks: &[GroundTruthTask],
    text_equiv: &dyn TextEquivalence,
    window: usize,
    seed: u64,
) -> Result<RuleVerifiedReport, RewardDataError> {
    let mut samples = Vec::new();
    let mut skipped = 0u64;
    let seed_tag = seed.to_string();
    for task in tasks {
        task.validate()?;
        let t = &task.trajectory;
        let goal = &t.task.goal_text;
        for (i, truth) in task.truths.iter().enumerate() {
            let Some(truth) = truth else {
                skipped += 1;
                continue;
            };
            let prefix = t.prefix(i);
            let proposal =
                policy.propose(goal, &prefix.final_observation, &prefix.action_descs(), 1)?;
            let Some(candidate) = proposal.candidates.into_iter().next() else {
                log::warn!("policy proposed nothing at step {i} of {}", t.task.task_id);
                skipped += 1;
                continue;
            };
            let som_map = prefix.final_observation.som_map();
            let verdict = match verify_action(&candidate, truth, text_equiv, Some(&som_map)) {
                Ok(v) => v,
                Err(err) => {
                    log::warn!("step {i} of {} is unverifiable: {err}", t.task.task_id);
                    skipped += 1;
                    continue;
                }
            };
            let label = match verdict.label() {
                Label::Positive => SampleLabel::YPlus,
                Label::Negative => SampleLabel::YMinus,
            };
            let query = build_reward_query(goal, &prefix, candidate, window);
            samples.push(RewardSample::new(
                query,
                label,
                SampleSource::RuleVerification,
                &[&t.task.task_id, &i.to_string(), &seed_tag],
            ));
        }
    }
    Ok(RuleVerifiedReport { samples, skipped_steps: skipped })
}

// ---------------------------------------------------------------------------
// Trajectory corruption
// ---------------------------------------------------------------------------

/// A corruption recipe. Unset parameters are sampled deterministically from
/// the corruption seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Keep the first `keep` steps, then claim success. Simulates incomplete
    /// executions; `keep` ranges over [1, len-2].
    EarlyTruncation { keep: Option<usize> },
    /// Replace steps [start, end) with the same range of a same-world,
    /// different-task donor. Both trajectories' terminate steps are excluded
    /// from the range, and the spliced segment must differ from the original.
    CrossTaskSubstitution { splice: Option<(usize, usize)> },
    /// Drop the final terminate, append `extra_steps` no-effect steps, then
    /// claim success again. The goal stays satisfied; the claim is redundant.
    RedundantContinuation { extra_steps: Option<usize> },
}

/// Re-execute an action list from reset, recording truthful observations.
/// Corrupted trajectories must carry the screenshots their actions would
/// actually produce, otherwise outcome queries would show the wrong state.
fn rebuild(
    world: &Arc<SyntheticWorld>,
    task: TaskInstruction,
    actions: Vec<Action>,
) -> Result<Trajectory, RewardDataError> {
    let (mut session, obs) = reset(world.clone());
    let mut t = Trajectory::begin(task, world.world_id(), obs);
    for action in actions {
        if !session.terminal().is_running() {
            return Err(RewardDataError::InvalidCorruption(
                "corrupted action list exceeds the world's step budget".to_owned(),
            ));
        }
        let (obs, _) = session.step(&action).expect("running sessions accept steps");
        t.record(action, obs);
    }
    t.terminal = session.terminal();
    t.outcome_label = Some(OutcomeLabel::Failure);
    Ok(t)
}

fn require_verified_success(t: &Trajectory) -> Result<(), RewardDataError> {
    if t.outcome_label != Some(OutcomeLabel::Success) {
        return Err(RewardDataError::Precondition(
            "corruption requires a verified-success trajectory".to_owned(),
        ));
    }
    if !t.steps.last().is_some_and(|s| s.action.is_terminate()) {
        return Err(RewardDataError::Precondition(
            "success trajectory must end in terminate".to_owned(),
        ));
    }
    Ok(())
}

/// Corrupt a verified-success trajectory into a labeled negative. The input
/// and donors are never mutated; the output re-executes the corrupted action
/// list in `world` and always carries `outcome_label = failure`.
pub fn corrupt_trajectory(
    t: &Trajectory,
    world: &Arc<SyntheticWorld>,
    mode: CorruptionMode,
    donor_pool: &[Trajectory],
    seed: u64,
) -> Result<Trajectory, RewardDataError> {
    require_verified_success(t)?;
    if t.world_id != world.world_id() {
        return Err(RewardDataError::Precondition(format!(
            "trajectory belongs to world {}, not {}",
            t.world_id,
            world.world_id()
        )));
    }
    let len = t.len();
    let actions: Vec<Action> = t.steps.iter().map(|s| s.action.clone()).collect();
    let own_terminate = actions[len - 1].clone();

    match mode {
        CorruptionMode::EarlyTruncation { keep } => {
            if len < 3 {
                return Err(RewardDataError::InvalidCorruption(
                    "truncation needs at least three steps".to_owned(),
                ));
            }
            let keep = match keep {
                Some(k) => k,
                None => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, &["truncate", &t.id()]));
                    rng.gen_range(1..=len - 2)
                }
            };
            if keep == 0 || keep > len - 2 {
                return Err(RewardDataError::InvalidCorruption(format!(
                    "truncation index {keep} outside [1, {}]",
                    len - 2
                )));
            }
            let mut corrupted: Vec<Action> = actions[..keep].to_vec();
            corrupted.push(own_terminate);
            let out = rebuild(world, t.task.clone(), corrupted)?;
            ensure_goal_broken(world, &out)?;
            Ok(out)
        }
        CorruptionMode::CrossTaskSubstitution { splice } => {
            let donors: Vec<&Trajectory> = donor_pool
                .iter()
                .filter(|d| {
                    d.world_id == t.world_id
                        && d.task.task_id != t.task.task_id
                        && d.len() >= 2
                        && d.steps.last().is_some_and(|s| s.action.is_terminate())
                })
                .collect();
            if donors.is_empty() {
                return Err(RewardDataError::InvalidCorruption(
                    "no same-world different-task donor available".to_owned(),
                ));
            }
            // Rotate the donor pool deterministically and take the first
            // donor admitting a differing splice.
            let offset =
                (derive_seed(seed, &["donor", &t.id()]) % donors.len() as u64) as usize;
            for shift in 0..donors.len() {
                let donor = donors[(offset + shift) % donors.len()];
                let Some((start, end)) = pick_splice(t, donor, splice, seed)? else {
                    continue;
                };
                let mut corrupted = actions[..start].to_vec();
                corrupted.extend(donor.steps[start..end].iter().map(|s| s.action.clone()));
                corrupted.extend(actions[end..].iter().cloned());
                let out = rebuild(world, t.task.clone(), corrupted)?;
                ensure_goal_broken(world, &out)?;
                return Ok(out);
            }
            Err(RewardDataError::InvalidCorruption(
                "no donor admits a differing splice".to_owned(),
            ))
        }
        CorruptionMode::RedundantContinuation { extra_steps } => {
            let m = match extra_steps {
                Some(m) => m,
                None => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, &["continue", &t.id()]));
                    rng.gen_range(1..=3)
                }
            };
            if m == 0 {
                return Err(RewardDataError::InvalidCorruption(
                    "continuation needs at least one extra step".to_owned(),
                ));
            }
            let mut corrupted: Vec<Action> = actions[..len - 1].to_vec();
            for i in 0..m {
                corrupted.push(redundant_step(i));
            }
            corrupted.push(own_terminate);
            rebuild(world, t.task.clone(), corrupted)
        }
    }
}

/// Truncation and substitution must actually break the task; a corruption
/// that still satisfies the goal would carry a wrong label.
fn ensure_goal_broken(
    world: &Arc<SyntheticWorld>,
    corrupted: &Trajectory,
) -> Result<(), RewardDataError> {
    let actions: Vec<Action> = corrupted.steps.iter().map(|s| s.action.clone()).collect();
    let (_, trace) = crate::trajectory::replay_actions(world, &actions);
    if trace.goal_at_end {
        return Err(RewardDataError::InvalidCorruption(
            "corrupted trajectory still satisfies the goal".to_owned(),
        ));
    }
    Ok(())
}

/// Splice ranges exclude both final terminates; when unset, the range spans
/// from the first differing step to the end of the shared body.
fn pick_splice(
    t: &Trajectory,
    donor: &Trajectory,
    splice: Option<(usize, usize)>,
    seed: u64,
) -> Result<Option<(usize, usize)>, RewardDataError> {
    let bound = t.len().min(donor.len()) - 1;
    let differs = |range: (usize, usize)| {
        (range.0..range.1).any(|i| {
            serialize_action(&t.steps[i].action) != serialize_action(&donor.steps[i].action)
        })
    };
    match splice {
        Some((start, end)) => {
            if start >= end || end > bound {
                return Err(RewardDataError::InvalidCorruption(format!(
                    "splice range [{start}, {end}) outside [0, {bound})"
                )));
            }
            if !differs((start, end)) {
                return Err(RewardDataError::InvalidCorruption(
                    "spliced segment is identical to the original".to_owned(),
                ));
            }
            Ok(Some((start, end)))
        }
        None => {
            let Some(diverge) = (0..bound).find(|&i| {
                serialize_action(&t.steps[i].action) != serialize_action(&donor.steps[i].action)
            }) else {
                return Ok(None);
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &["splice", &t.id(), &donor.id()],
            ));
            let start = rng.gen_range(0..=diverge);
            Ok(Some((start, diverge + 1)))
        }
    }
}

/// No-effect filler for redundant continuations: executable on any screen
/// and guaranteed not to change state.
fn redundant_step(i: usize) -> Action {
    match i % 3 {
        0 => Action::wait(1.0, "wait on the final screen"),
        1 => Action::swipe(
            crate::action::Target::Coordinate { x: 540, y: 960 },
            crate::action::Direction::Down,
            crate::action::SwipeDistance::Short,
            "swipe around",
        ),
        _ => Action::wait(2.0, "wait a little longer"),
    }
}

/// Record a same-world donor for substitution: walk the chain partway, click
/// a detour into a trap, idle until the budget's worth of body steps, then
/// claim failure. Panics if `world` was not produced by the generator with
/// branching ≥ 2.
pub fn decoy_trajectory(world: &Arc<SyntheticWorld>, seed: u64) -> Trajectory {
    let meta = world.meta.expect("decoys require a generated world");
    assert!(meta.depth >= 1, "decoys need at least one chain step");
    assert!(meta.branching >= 2, "decoys need detour elements");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["decoy"]));
    let detour_at = rng.gen_range(0..meta.depth);

    let task = TaskInstruction::new(
        format!("visit detour {detour_at} and give up"),
        format!("decoy_{seed}"),
        TaskSource::ManualComplex,
    );
    let (mut session, obs) = reset(world.clone());
    let mut t = Trajectory::begin(task, world.world_id(), obs.clone());
    let mut current = obs;
    for step in 0..meta.depth {
        let wanted = if step == detour_at { "detour_" } else { "continue_" };
        let element = current
            .som_annotations
            .iter()
            .find(|a| a.label.starts_with(wanted))
            .or_else(|| current.som_annotations.first())
            .expect("generated screens have elements");
        let (x, y) = element.bbox.center();
        let action = Action::click(x, y, format!("tap {}", element.label));
        let (obs, _) = session.step(&action).expect("within budget");
        t.record(action, obs.clone());
        current = obs;
    }
    let claim = Action::terminate(TerminateStatus::Failure, "could not finish");
    let (obs, _) = session.step(&claim).expect("within budget");
    t.record(claim, obs);
    t.terminal = session.terminal();
    t.outcome_label = Some(OutcomeLabel::Failure);
    t
}

// ---------------------------------------------------------------------------
// Hard-negative mining
// ---------------------------------------------------------------------------

/// Filter true negatives down to the ones the scorer misclassifies as
/// positive, re-sourced as hard negatives. Labels are never changed.
pub fn mine_hard_negatives(
    scorer: &dyn RewardBackend,
    candidate_negatives: &[RewardSample],
) -> Result<Vec<RewardSample>, RewardDataError> {
    let mut mined = Vec::new();
    for sample in candidate_negatives {
        if sample.label != SampleLabel::YMinus {
            return Err(RewardDataError::Precondition(format!(
                "mining input {} is not a true negative",
                sample.sample_id
            )));
        }
        let score = scorer.score(&sample.query)?;
        if score.label == Label::Positive {
            mined.push(RewardSample::new(
                sample.query.clone(),
                SampleLabel::YMinus,
                SampleSource::HardNegative,
                &["mined", &sample.sample_id],
            ));
        }
    }
    Ok(mined)
}

// ---------------------------------------------------------------------------
// Dataset emission
// ---------------------------------------------------------------------------

/// Per-label counts within one source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub y_plus: u64,
    pub y_minus: u64,
}

/// Sidecar manifest describing an emitted dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub total: u64,
    pub counts: BTreeMap<String, LabelCounts>,
}

impl DatasetManifest {
    fn tally(samples: &[RewardSample]) -> DatasetManifest {
        let mut counts: BTreeMap<String, LabelCounts> = BTreeMap::new();
        for s in samples {
            let entry = counts.entry(s.source.as_str().to_owned()).or_default();
            match s.label {
                SampleLabel::YPlus => entry.y_plus += 1,
                SampleLabel::YMinus => entry.y_minus += 1,
            }
        }
        DatasetManifest {
            schema_version: REWARD_SAMPLES_SCHEMA_VERSION.to_owned(),
            total: samples.len() as u64,
            counts,
        }
    }
}

/// Write `reward_samples.v1.jsonl` (sorted by sample_id) and `manifest.json`
/// under `dir`. Byte-deterministic for a given sample set.
pub fn emit_dataset(samples: &[RewardSample], dir: &Path) -> Result<DatasetManifest, RewardDataError> {
    let mut sorted: Vec<&RewardSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    for pair in sorted.windows(2) {
        if pair[0].sample_id == pair[1].sample_id {
            return Err(RewardDataError::DuplicateSample(pair[0].sample_id.clone()));
        }
    }
    let mut text = String::new();
    for s in &sorted {
        text.push_str(&serde_json::to_string(s).expect("samples serialize"));
        text.push('\n');
    }
    atomic_write(&dir.join("reward_samples.v1.jsonl"), text.as_bytes())?;
    let manifest = DatasetManifest::tally(samples);
    write_json_pretty(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Read a dataset back and check it against its manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<RewardSample>, RewardDataError> {
    let samples: Vec<RewardSample> = read_jsonl(&dir.join("reward_samples.v1.jsonl"))?;
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != REWARD_SAMPLES_SCHEMA_VERSION {
        return Err(RewardDataError::Precondition(format!(
            "unsupported dataset schema {}",
            manifest.schema_version
        )));
    }
    if manifest != DatasetManifest::tally(&samples) {
        return Err(RewardDataError::Precondition(
            "manifest counts do not match dataset contents".to_owned(),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &samples {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(RewardDataError::DuplicateSample(s.sample_id.clone()));
        }
    }
    Ok(samples)
}
