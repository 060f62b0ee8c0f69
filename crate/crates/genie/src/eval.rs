//! Evaluation harnesses: a paired reward-model benchmark with F1 reporting,
//! and best-of-N test-time scaling measurement.
//!
//! The benchmark pairs every positive with a negative. Step pairs share their
//! entire query context and differ only in the candidate action: the positive
//! carries the ground-truth action, the negative a rule-verified policy
//! mistake from the same state. Outcome pairs share the task: the positive is
//! a verified success's completion claim, the negative the completion claim
//! of a corrupted variant of that success, whose history and final screen
//! necessarily differ.
//!
//! Best-of-N re-proposes N candidates per benchmarked step, lets the scorer
//! pick the argmax, and judges the pick against ground truth; task success
//! requires every benchmarked step of a task to be judged correct.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{
    classify_difficulty, serialize_action, verify_action, Action, Difficulty, GroundTruthAction,
    TextEquivalence,
};
use crate::backend::{
    build_reward_query, BackendError, PolicyBackend, RewardBackend, DEFAULT_K_CANDIDATES,
    DEFAULT_WINDOW,
};
use crate::io::{read_jsonl, write_jsonl, IoError};
use crate::reward_data::{
    corrupt_trajectory, ground_truth_for_trajectory, CorruptionMode, Granularity,
    RewardDataError, RewardSample, SampleLabel, SampleSource,
};
use crate::seed::derive_seed;
use crate::session::Observation;
use crate::trajectory::Trajectory;
use crate::world::{screen_distances, SyntheticWorld};

pub const RM_BENCHMARK_FILE: &str = "rm_benchmark.v1.jsonl";
pub const F1_REPORT_FILE: &str = "f1_report.json";
pub const SCALING_REPORT_FILE: &str = "scaling_report.json";

/// Corruption passes attempted per source trajectory before the builder
/// gives up on reaching the requested outcome-pair count.
const MAX_OUTCOME_PASSES: u64 = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    /// The source trajectories cannot supply the requested benchmark sizes.
    #[error("insufficient source data: {0}")]
    InsufficientSource(String),
    #[error("invalid benchmark: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Data(#[from] RewardDataError),
    #[error(transparent)]
    Io(#[from] IoError),
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

/// One step-level benchmark item: a positive/negative sample pair over the
/// same state, plus what best-of-N needs to re-propose and judge there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepPair {
    pub task_id: String,
    pub step_index: usize,
    pub difficulty: Difficulty,
    /// The observation both candidates act on.
    pub observation: Observation,
    /// Reference answer for rule judging.
    pub truth: GroundTruthAction,
    pub positive: RewardSample,
    pub negative: RewardSample,
}

/// One outcome-level benchmark item: the completion claim of a verified
/// success paired with the claim of its corrupted variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomePair {
    pub task_id: String,
    pub difficulty: Difficulty,
    pub positive: RewardSample,
    pub negative: RewardSample,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RMBenchmark {
    pub step_pairs: Vec<StepPair>,
    pub outcome_pairs: Vec<OutcomePair>,
}

impl RMBenchmark {
    /// Check pairing invariants: labels, granularities, and for step pairs
    /// that positive and negative share the full query context and differ
    /// only in the candidate.
    pub fn validate(&self) -> Result<(), EvalError> {
        for (i, p) in self.step_pairs.iter().enumerate() {
            let err = |msg: &str| Err(EvalError::Invalid(format!("step pair {i}: {msg}")));
            if p.positive.label != SampleLabel::YPlus || p.negative.label != SampleLabel::YMinus {
                return err("labels must be y_plus / y_minus");
            }
            if p.positive.granularity != Granularity::Step
                || p.negative.granularity != Granularity::Step
            {
                return err("both samples must be step granularity");
            }
            let (a, b) = (&p.positive.query, &p.negative.query);
            if a.goal != b.goal
                || a.history_summaries != b.history_summaries
                || a.windowed_screenshots != b.windowed_screenshots
                || a.current_screenshot != b.current_screenshot
            {
                return err("samples must share the query context");
            }
            if a.candidate == b.candidate {
                return err("candidates must differ");
            }
            if a.current_screenshot != p.observation.screenshot {
                return err("observation must match the query's current screenshot");
            }
        }
        for (i, p) in self.outcome_pairs.iter().enumerate() {
            let err = |msg: &str| Err(EvalError::Invalid(format!("outcome pair {i}: {msg}")));
            if p.positive.label != SampleLabel::YPlus || p.negative.label != SampleLabel::YMinus {
                return err("labels must be y_plus / y_minus");
            }
            if p.positive.granularity != Granularity::Outcome
                || p.negative.granularity != Granularity::Outcome
            {
                return err("both samples must be outcome granularity");
            }
            if p.positive.query.goal != p.negative.query.goal {
                return err("samples must share the task goal");
            }
        }
        Ok(())
    }

    /// Pair counts per difficulty: (step, outcome).
    pub fn counts_per_difficulty(&self) -> BTreeMap<String, (usize, usize)> {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for p in &self.step_pairs {
            counts.entry(p.difficulty.to_string()).or_default().0 += 1;
        }
        for p in &self.outcome_pairs {
            counts.entry(p.difficulty.to_string()).or_default().1 += 1;
        }
        counts
    }
}

/// Line format of `rm_benchmark.v1.jsonl`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "item", rename_all = "snake_case")]
enum BenchmarkRecord {
    Step(StepPair),
    Outcome(OutcomePair),
}

pub fn write_rm_benchmark(bench: &RMBenchmark, path: &Path) -> Result<(), EvalError> {
    bench.validate()?;
    let records: Vec<BenchmarkRecord> = bench
        .step_pairs
        .iter()
        .cloned()
        .map(BenchmarkRecord::Step)
        .chain(bench.outcome_pairs.iter().cloned().map(BenchmarkRecord::Outcome))
        .collect();
    write_jsonl(path, &records)?;
    Ok(())
}

pub fn read_rm_benchmark(path: &Path) -> Result<RMBenchmark, EvalError> {
    let records: Vec<BenchmarkRecord> = read_jsonl(path)?;
    let mut bench = RMBenchmark::default();
    for record in records {
        match record {
            BenchmarkRecord::Step(p) => bench.step_pairs.push(p),
            BenchmarkRecord::Outcome(p) => bench.outcome_pairs.push(p),
        }
    }
    bench.validate()?;
    Ok(bench)
}

/// Requested pair counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSizes {
    pub step: usize,
    pub outcome: usize,
}

fn trajectory_difficulty(t: &Trajectory) -> Difficulty {
    classify_difficulty(t.task.reference_length.unwrap_or(t.len() as u32))
}

/// Build a paired benchmark from verified reference trajectories.
///
/// Step pairs sample annotated non-terminate steps that strictly advance
/// the task in their world (a deterministic shuffle of all eligible steps,
/// driven by `seed`); padding steps (waits, detours) are excluded because a
/// candidate "mistake" against them can be a perfectly sensible action.
/// Each pair needs the policy to supply at least one candidate failing rule
/// verification at that state. Outcome pairs corrupt the source trajectories
/// with the given modes, re-executing in their worlds (`worlds` is keyed by
/// world_id), so every negative's history shows what really happens.
pub fn build_rm_benchmark(
    trajectories: &[Trajectory],
    worlds: &BTreeMap<String, Arc<SyntheticWorld>>,
    policy: &dyn PolicyBackend,
    text_equiv: &dyn TextEquivalence,
    corruption_modes: &[CorruptionMode],
    sizes: BenchmarkSizes,
    seed: u64,
) -> Result<RMBenchmark, EvalError> {
    let truths: Vec<_> = trajectories.iter().map(ground_truth_for_trajectory).collect();
    let distances: BTreeMap<&String, BTreeMap<String, u32>> =
        worlds.iter().map(|(id, w)| (id, screen_distances(w))).collect();

    // Step pairs: shuffled eligible (trajectory, step) slots, first-fit.
    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for (ti, task) in truths.iter().enumerate() {
        let t = &trajectories[ti];
        let Some(dist) = distances.get(&t.world_id) else { continue };
        for (si, truth) in task.truths.iter().enumerate() {
            if truth.is_none() || t.steps[si].action.is_terminate() {
                continue;
            }
            let pre = &t.steps[si].observation.screen_id;
            let post = if si + 1 < t.len() {
                &t.steps[si + 1].observation.screen_id
            } else {
                &t.final_observation.screen_id
            };
            let advanced = matches!((dist.get(pre), dist.get(post)), (Some(a), Some(b)) if b < a);
            if advanced {
                eligible.push((ti, si));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["bench_step"]));
    eligible.shuffle(&mut rng);

    let mut step_pairs: Vec<StepPair> = Vec::new();
    for (ti, si) in eligible {
        if step_pairs.len() == sizes.step {
            break;
        }
        let t = &trajectories[ti];
        let truth = truths[ti].truths[si].as_ref().expect("eligible steps are annotated");
        let prefix = t.prefix(si);
        let observation = t.steps[si].observation.clone();
        let som_map = observation.som_map();
        let proposal = policy.propose(
            &t.task.goal_text,
            &observation,
            &prefix.action_descs(),
            DEFAULT_K_CANDIDATES,
        )?;
        // A usable negative is a non-terminate candidate that fails rule
        // verification; terminate candidates would flip the granularity.
        let mistake = proposal.candidates.into_iter().find(|c| {
            !c.is_terminate()
                && verify_action(c, truth, text_equiv, Some(&som_map))
                    .map(|v| !v.is_positive())
                    .unwrap_or(false)
        });
        let Some(mistake) = mistake else { continue };
        let goal = &t.task.goal_text;
        let si_tag = si.to_string();
        let positive = RewardSample::new(
            build_reward_query(goal, &prefix, t.steps[si].action.clone(), DEFAULT_WINDOW),
            SampleLabel::YPlus,
            SampleSource::RuleVerification,
            &[&t.task.task_id, &si_tag, "pos"],
        );
        let negative = RewardSample::new(
            build_reward_query(goal, &prefix, mistake, DEFAULT_WINDOW),
            SampleLabel::YMinus,
            SampleSource::RuleVerification,
            &[&t.task.task_id, &si_tag, "neg"],
        );
        step_pairs.push(StepPair {
            task_id: t.task.task_id.clone(),
            step_index: si,
            difficulty: trajectory_difficulty(t),
            observation,
            truth: truth.clone(),
            positive,
            negative,
        });
    }
    if step_pairs.len() < sizes.step {
        return Err(EvalError::InsufficientSource(format!(
            "step pairs: requested {}, only {} available",
            sizes.step,
            step_pairs.len()
        )));
    }
    step_pairs.sort_by(|a, b| (&a.task_id, a.step_index).cmp(&(&b.task_id, b.step_index)));

    // Outcome pairs: corrupt shuffled source trajectories, several passes
    // with fresh corruption seeds if one per source is not enough.
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["bench_outcome"]));
    order.shuffle(&mut rng);

    let mut outcome_pairs: Vec<OutcomePair> = Vec::new();
    let mut seen_negatives = std::collections::BTreeSet::new();
    'passes: for pass in 0..MAX_OUTCOME_PASSES {
        let mut progressed = false;
        for &ti in &order {
            if outcome_pairs.len() == sizes.outcome {
                break 'passes;
            }
            let t = &trajectories[ti];
            let Some(world) = worlds.get(&t.world_id) else { continue };
            if t.is_empty() || !t.steps[t.len() - 1].action.is_terminate() {
                continue;
            }
            let pass_tag = pass.to_string();
            let corrupted = corruption_modes.iter().enumerate().find_map(|(mi, mode)| {
                let corruption_seed = derive_seed(
                    seed,
                    &["bench_corrupt", &pass_tag, &t.task.task_id, &mi.to_string()],
                );
                corrupt_trajectory(t, world, *mode, trajectories, corruption_seed).ok()
            });
            let Some(corrupted) = corrupted else { continue };

            let goal = &t.task.goal_text;
            let own_claim = t.steps[t.len() - 1].action.clone();
            let positive = RewardSample::new(
                build_reward_query(goal, &t.prefix(t.len() - 1), own_claim, DEFAULT_WINDOW),
                SampleLabel::YPlus,
                SampleSource::RuleVerification,
                &[&t.task.task_id, "outcome_pos"],
            );
            let claim = corrupted.steps[corrupted.len() - 1].action.clone();
            let negative = RewardSample::new(
                build_reward_query(
                    goal,
                    &corrupted.prefix(corrupted.len() - 1),
                    claim,
                    DEFAULT_WINDOW,
                ),
                SampleLabel::YMinus,
                SampleSource::Corruption,
                &[&t.task.task_id, "outcome_neg", &pass_tag],
            );
            // Different passes can corrupt to the same result; keep one.
            if !seen_negatives.insert(negative.query.identity()) {
                continue;
            }
            outcome_pairs.push(OutcomePair {
                task_id: t.task.task_id.clone(),
                difficulty: trajectory_difficulty(t),
                positive,
                negative,
            });
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    if outcome_pairs.len() < sizes.outcome {
        return Err(EvalError::InsufficientSource(format!(
            "outcome pairs: requested {}, only {} available",
            sizes.outcome,
            outcome_pairs.len()
        )));
    }
    outcome_pairs
        .sort_by(|a, b| (&a.task_id, &a.negative.sample_id).cmp(&(&b.task_id, &b.negative.sample_id)));

    let bench = RMBenchmark { step_pairs, outcome_pairs };
    bench.validate()?;
    Ok(bench)
}

// ---------------------------------------------------------------------------
// F1 reporting
// ---------------------------------------------------------------------------

/// Confusion counts for the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn record(&mut self, truth_positive: bool, predicted_positive: bool) {
        match (truth_positive, predicted_positive) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// 2PR/(P+R) with 0/0 defined as 0, computed in the equivalent integer
    /// form 2TP/(2TP+FP+FN) so crafted counts give exact fractions.
    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Confusion counts plus the derived positive-class metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Confusion> for BucketMetrics {
    fn from(confusion: Confusion) -> Self {
        BucketMetrics {
            confusion,
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
        }
    }
}

/// Metrics for one granularity, overall and per difficulty bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GranularityReport {
    pub overall: BucketMetrics,
    pub easy: BucketMetrics,
    pub medium: BucketMetrics,
    pub hard: BucketMetrics,
}

impl GranularityReport {
    pub fn bucket(&self, difficulty: Difficulty) -> &BucketMetrics {
        match difficulty {
            Difficulty::Easy => &self.easy,
            Difficulty::Medium => &self.medium,
            Difficulty::Hard => &self.hard,
        }
    }
}

/// Serialized as `f1_report.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub theta: f64,
    pub step: GranularityReport,
    pub outcome: GranularityReport,
}

/// Score every sample of every pair, threshold at `theta`, and fold the
/// confusion counts per granularity and difficulty. Scoring fans out
/// concurrently; assembly is serial.
pub fn eval_reward_model(
    scorer: &dyn RewardBackend,
    bench: &RMBenchmark,
    theta: f64,
) -> Result<F1Report, EvalError> {
    bench.validate()?;
    let items: Vec<(Granularity, Difficulty, &RewardSample)> = bench
        .step_pairs
        .iter()
        .flat_map(|p| {
            [(Granularity::Step, p.difficulty, &p.positive),
             (Granularity::Step, p.difficulty, &p.negative)]
        })
        .chain(bench.outcome_pairs.iter().flat_map(|p| {
            [(Granularity::Outcome, p.difficulty, &p.positive),
             (Granularity::Outcome, p.difficulty, &p.negative)]
        }))
        .collect();

    let judged: Vec<(Granularity, Difficulty, bool, SampleLabel)> = items
        .into_par_iter()
        .map(|(g, d, sample)| {
            let score = scorer.score(&sample.query)?;
            Ok((g, d, score.p_positive >= theta, sample.label))
        })
        .collect::<Result<_, BackendError>>()?;

    let mut step = [Confusion::default(); 4];
    let mut outcome = [Confusion::default(); 4];
    for (g, d, predicted, label) in judged {
        let table = match g {
            Granularity::Step => &mut step,
            Granularity::Outcome => &mut outcome,
        };
        let truth = label == SampleLabel::YPlus;
        table[0].record(truth, predicted);
        let bucket = match d {
            Difficulty::Easy => 1,
            Difficulty::Medium => 2,
            Difficulty::Hard => 3,
        };
        table[bucket].record(truth, predicted);
    }
    let report = |t: [Confusion; 4]| GranularityReport {
        overall: t[0].into(),
        easy: t[1].into(),
        medium: t[2].into(),
        hard: t[3].into(),
    };
    Ok(F1Report { theta, step: report(step), outcome: report(outcome) })
}

// ---------------------------------------------------------------------------
// Best-of-N scaling
// ---------------------------------------------------------------------------

/// Success counts within one bucket. Task success requires every benchmarked
/// step of the task to be judged correct.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SrBucket {
    pub steps: u64,
    pub steps_correct: u64,
    pub step_sr: f64,
    pub tasks: u64,
    pub tasks_correct: u64,
    pub task_sr: f64,
}

/// Results for one candidate-budget N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub overall: SrBucket,
    pub per_difficulty: BTreeMap<String, SrBucket>,
}

/// Serialized as `scaling_report.json`. The seed is recorded for manifest
/// reproducibility; candidate sampling itself is the policy's (deterministic)
/// concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub seed: u64,
    pub points: Vec<ScalingPoint>,
}

/// For each N: re-propose up to N candidates per benchmarked step, let the
/// scorer pick the argmax `p_positive` (ties broken by canonical action
/// order), and judge the pick against the step's ground truth.
pub fn best_of_n(
    policy: &dyn PolicyBackend,
    scorer: &dyn RewardBackend,
    bench: &RMBenchmark,
    text_equiv: &dyn TextEquivalence,
    n_values: &[usize],
    seed: u64,
) -> Result<ScalingReport, EvalError> {
    bench.validate()?;
    if n_values.iter().any(|&n| n == 0) {
        return Err(EvalError::Invalid("n_values must be positive".to_owned()));
    }

    let mut points = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let judged: Vec<(Difficulty, &str, bool)> = bench
            .step_pairs
            .par_iter()
            .map(|pair| {
                let base = &pair.positive.query;
                let proposal = policy.propose(
                    &base.goal,
                    &pair.observation,
                    &base.history_summaries,
                    n,
                )?;
                let mut best: Option<(f64, String, Action)> = None;
                for candidate in proposal.candidates {
                    let mut query = base.clone();
                    query.candidate = candidate.clone();
                    let p = scorer.score(&query)?.p_positive;
                    let key = serialize_action(&candidate);
                    let better = match &best {
                        None => true,
                        Some((bp, bk, _)) => p > *bp || (p == *bp && key < *bk),
                    };
                    if better {
                        best = Some((p, key, candidate));
                    }
                }
                let (_, _, pick) = best.expect("proposals are nonempty");
                let correct =
                    verify_action(&pick, &pair.truth, text_equiv, Some(&pair.observation.som_map()))
                        .map(|v| v.is_positive())
                        .unwrap_or(false);
                Ok((pair.difficulty, pair.task_id.as_str(), correct))
            })
            .collect::<Result<_, BackendError>>()?;

        let mut overall = SrBucket::default();
        let mut buckets: BTreeMap<String, SrBucket> = BTreeMap::new();
        let mut task_ok: BTreeMap<&str, (Difficulty, bool)> = BTreeMap::new();
        for (difficulty, task_id, correct) in judged {
            overall.steps += 1;
            overall.steps_correct += u64::from(correct);
            let bucket = buckets.entry(difficulty.to_string()).or_default();
            bucket.steps += 1;
            bucket.steps_correct += u64::from(correct);
            let entry = task_ok.entry(task_id).or_insert((difficulty, true));
            entry.1 &= correct;
        }
        for (_, (difficulty, ok)) in task_ok {
            overall.tasks += 1;
            overall.tasks_correct += u64::from(ok);
            let bucket = buckets.entry(difficulty.to_string()).or_default();
            bucket.tasks += 1;
            bucket.tasks_correct += u64::from(ok);
        }
        let finish = |b: &mut SrBucket| {
            b.step_sr = if b.steps == 0 { 0.0 } else { b.steps_correct as f64 / b.steps as f64 };
            b.task_sr = if b.tasks == 0 { 0.0 } else { b.tasks_correct as f64 / b.tasks as f64 };
        };
        finish(&mut overall);
        buckets.values_mut().for_each(finish);
        points.push(ScalingPoint { n, overall, per_difficulty: buckets });
    }
    Ok(ScalingReport { seed, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{NormalizedEquality, TerminateStatus};
    use crate::backend::{PolicyProposal, RewardQuery, RewardScore, DEFAULT_THETA};
    use crate::oracle::{OracleConfig, OracleRouter};
    use crate::session::reset;
    use crate::trajectory::{chain_walk, OutcomeLabel, TaskInstruction};
    use crate::world::generate_world;

    /// The canonical walk plus a wait-padded variant per world, so
    /// substitution always finds a differing same-world donor.
    fn gt_pool(worlds: &[Arc<SyntheticWorld>]) -> Vec<Trajectory> {
        let mut pool = Vec::new();
        for (i, world) in worlds.iter().enumerate() {
            pool.push(chain_walk(world, &format!("gt_{i:02}")));
            pool.push(padded_walk(world, &format!("gt_pad_{i:02}")));
        }
        pool
    }

    fn padded_walk(world: &Arc<SyntheticWorld>, task_id: &str) -> Trajectory {
        let depth = world.meta.expect("generated world").depth;
        let task = TaskInstruction::for_world(world, task_id);
        let (mut session, obs) = reset(world.clone());
        let mut t = Trajectory::begin(task, world.world_id(), obs);
        let push = |t: &mut Trajectory, session: &mut crate::session::EnvSession, a: Action| {
            let (obs, _) = session.step(&a).expect("steps");
            t.record(a, obs);
        };
        push(&mut t, &mut session, Action::wait(1.0, "wait for the app"));
        for i in 0..depth {
            let screen = world.screen(&format!("s{i:02}")).expect("chain screen");
            let forward = &screen.elements[0];
            let (cx, cy) = forward.bbox.center();
            push(&mut t, &mut session, Action::click(cx, cy, format!("tap {}", forward.label)));
        }
        push(&mut t, &mut session, Action::terminate(TerminateStatus::Success, "task finished"));
        assert!(session.goal_satisfied());
        t.terminal = session.terminal();
        t.outcome_label = Some(OutcomeLabel::Success);
        t
    }

    fn world_index(worlds: &[Arc<SyntheticWorld>]) -> BTreeMap<String, Arc<SyntheticWorld>> {
        worlds.iter().map(|w| (w.world_id(), w.clone())).collect()
    }

    fn standard_modes() -> Vec<CorruptionMode> {
        vec![
            CorruptionMode::EarlyTruncation { keep: None },
            CorruptionMode::CrossTaskSubstitution { splice: None },
        ]
    }

    /// Scores queries from a fixed table keyed by query identity.
    struct CannedScorer(BTreeMap<String, f64>);

    impl RewardBackend for CannedScorer {
        fn score(&self, query: &RewardQuery) -> Result<RewardScore, BackendError> {
            let p = *self.0.get(&query.identity()).expect("query was canned");
            Ok(RewardScore::from_p(p, DEFAULT_THETA))
        }
    }

    fn benchmark_fixture(
        depths: &[u32],
        sizes: BenchmarkSizes,
        seed: u64,
    ) -> (RMBenchmark, Vec<Arc<SyntheticWorld>>) {
        let worlds: Vec<_> = depths
            .iter()
            .enumerate()
            .map(|(i, &d)| Arc::new(generate_world(d, 2, 1, 100 + i as u64)))
            .collect();
        let pool = gt_pool(&worlds);
        let policy = OracleRouter::from_worlds(&worlds, OracleConfig::exact(2)).expect("oracles");
        let bench = build_rm_benchmark(
            &pool,
            &world_index(&worlds),
            &policy,
            &NormalizedEquality,
            &standard_modes(),
            sizes,
            seed,
        )
        .expect("benchmark");
        (bench, worlds)
    }

    #[test]
    fn exact_oracle_scores_the_benchmark_perfectly() {
        let sizes = BenchmarkSizes { step: 24, outcome: 6 };
        let (bench, worlds) = benchmark_fixture(&[2, 6, 11], sizes, 5);
        assert_eq!(bench.step_pairs.len(), 24);
        assert_eq!(bench.outcome_pairs.len(), 6);
        let per_difficulty = bench.counts_per_difficulty();
        assert_eq!(
            per_difficulty.values().map(|c| c.0).sum::<usize>(),
            sizes.step,
            "step pair counts per difficulty sum to the total"
        );

        let scorer = OracleRouter::from_worlds(&worlds, OracleConfig::exact(2)).expect("oracles");
        let report = eval_reward_model(&scorer, &bench, DEFAULT_THETA).expect("f1");
        for granularity in [&report.step, &report.outcome] {
            assert_eq!(granularity.overall.f1, 1.0);
            assert_eq!(granularity.overall.precision, 1.0);
            assert_eq!(granularity.overall.recall, 1.0);
        }
        assert_eq!(report.step.overall.confusion.total(), 2 * 24);
        assert_eq!(report.outcome.overall.confusion.total(), 2 * 6);
        // Depths 2 / 6 / 11 populate all three buckets at both granularities.
        for difficulty in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
            let step = report.step.bucket(difficulty);
            assert!(step.confusion.total() > 0, "{difficulty} step bucket populated");
            assert_eq!(step.f1, 1.0, "{difficulty} step f1");
            let outcome = report.outcome.bucket(difficulty);
            assert!(outcome.confusion.total() > 0, "{difficulty} outcome bucket populated");
            assert_eq!(outcome.f1, 1.0, "{difficulty} outcome f1");
        }
        let bucket_total: u64 = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard]
            .iter()
            .map(|&d| report.step.bucket(d).confusion.total())
            .sum();
        assert_eq!(bucket_total, report.step.overall.confusion.total());
    }

    #[test]
    fn crafted_confusion_yields_two_thirds_exactly() {
        let (bench, _) = benchmark_fixture(&[4], BenchmarkSizes { step: 3, outcome: 0 }, 9);
        let mut canned = BTreeMap::new();
        // Positives scored [1,1,0] and negatives [1,0,0]: TP=2 FN=1 FP=1 TN=2.
        for (i, pair) in bench.step_pairs.iter().enumerate() {
            canned.insert(pair.positive.query.identity(), if i < 2 { 1.0 } else { 0.0 });
            canned.insert(pair.negative.query.identity(), if i == 0 { 1.0 } else { 0.0 });
        }
        let report =
            eval_reward_model(&CannedScorer(canned), &bench, DEFAULT_THETA).expect("f1");
        let m = report.step.overall;
        assert_eq!(m.confusion, Confusion { tp: 2, fp: 1, fn_: 1, tn: 2 });
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 2.0 / 3.0);
        assert_eq!(m.f1, 2.0 / 3.0);
    }

    #[test]
    fn f1_handles_empty_and_degenerate_buckets() {
        let empty = Confusion::default();
        assert_eq!(empty.precision(), 0.0);
        assert_eq!(empty.recall(), 0.0);
        assert_eq!(empty.f1(), 0.0);
        // All-negative predictions: no true positives, defined as zero.
        let all_neg = Confusion { tp: 0, fp: 0, fn_: 3, tn: 3 };
        assert_eq!(all_neg.f1(), 0.0);
        // All-positive predictions: recall 1, precision = positives/total.
        let all_pos = Confusion { tp: 3, fp: 3, fn_: 0, tn: 0 };
        assert_eq!(all_pos.recall(), 1.0);
        assert_eq!(all_pos.precision(), 0.5);
    }

    #[test]
    fn benchmark_is_deterministic_and_round_trips() {
        let sizes = BenchmarkSizes { step: 8, outcome: 3 };
        let (bench_a, _) = benchmark_fixture(&[3, 4], sizes, 11);
        let (bench_b, _) = benchmark_fixture(&[3, 4], sizes, 11);
        assert_eq!(bench_a, bench_b);

        let dir = tempfile::tempdir().expect("tempdir");
        let path_a = dir.path().join(RM_BENCHMARK_FILE);
        let path_b = dir.path().join("again.jsonl");
        write_rm_benchmark(&bench_a, &path_a).expect("write");
        write_rm_benchmark(&bench_a, &path_b).expect("write");
        assert_eq!(
            std::fs::read(&path_a).expect("bytes"),
            std::fs::read(&path_b).expect("bytes")
        );
        let reread = read_rm_benchmark(&path_a).expect("read");
        assert_eq!(reread, bench_a);
    }

    #[test]
    fn insufficient_sources_are_reported() {
        let worlds = vec![Arc::new(generate_world(3, 2, 1, 200))];
        let pool = gt_pool(&worlds);
        let policy = OracleRouter::from_worlds(&worlds, OracleConfig::exact(2)).expect("oracles");
        for sizes in [
            BenchmarkSizes { step: 10_000, outcome: 0 },
            BenchmarkSizes { step: 1, outcome: 10_000 },
        ] {
            let err = build_rm_benchmark(
                &pool,
                &world_index(&worlds),
                &policy,
                &NormalizedEquality,
                &standard_modes(),
                sizes,
                3,
            )
            .unwrap_err();
            assert!(matches!(err, EvalError::InsufficientSource(_)), "sizes {sizes:?}: {err}");
        }
    }

    #[test]
    fn validate_rejects_tampered_pairs() {
        let (mut bench, _) = benchmark_fixture(&[3], BenchmarkSizes { step: 2, outcome: 1 }, 7);
        bench.step_pairs[0].negative.query.goal = "another goal".to_owned();
        assert!(matches!(
            bench.validate(),
            Err(EvalError::Invalid(msg)) if msg.contains("context")
        ));

        let (mut bench, _) = benchmark_fixture(&[3], BenchmarkSizes { step: 2, outcome: 1 }, 7);
        bench.step_pairs[1].negative = bench.step_pairs[1].positive.clone();
        assert!(bench.validate().is_err());

        let (mut bench, _) = benchmark_fixture(&[3], BenchmarkSizes { step: 2, outcome: 1 }, 7);
        let outcome_sample = bench.outcome_pairs[0].positive.clone();
        bench.step_pairs[0].positive = outcome_sample;
        assert!(bench.validate().is_err());
    }

    #[test]
    fn best_of_n_is_monotone_and_n1_matches_the_raw_policy() {
        let (bench, worlds) = benchmark_fixture(&[5], BenchmarkSizes { step: 9, outcome: 0 }, 13);
        let noisy = OracleRouter::from_worlds(
            &worlds,
            OracleConfig::exact(17).with_policy_noise(0.5),
        )
        .expect("oracles");
        let scorer = OracleRouter::from_worlds(&worlds, OracleConfig::exact(17)).expect("oracles");

        let report =
            best_of_n(&noisy, &scorer, &bench, &NormalizedEquality, &[1, 5, 10], 13).expect("scaling");
        assert_eq!(report.points.len(), 3);
        let srs: Vec<f64> = report.points.iter().map(|p| p.overall.step_sr).collect();
        assert!(srs[0] <= srs[1] && srs[1] <= srs[2], "non-decreasing: {srs:?}");
        assert_eq!(report.points.last().unwrap().overall.step_sr, 1.0, "N=10 recovers optimal");
        assert!(
            report.points.iter().all(|p| p.overall.steps == bench.step_pairs.len() as u64),
            "step counts consistent across N"
        );

        // N=1 must equal judging the policy's single candidate directly.
        let mut raw_correct = 0u64;
        for pair in &bench.step_pairs {
            let proposal = noisy
                .propose(&pair.positive.query.goal, &pair.observation, &pair.positive.query.history_summaries, 1)
                .expect("proposes");
            let correct = verify_action(
                &proposal.candidates[0],
                &pair.truth,
                &NormalizedEquality,
                Some(&pair.observation.som_map()),
            )
            .map(|v| v.is_positive())
            .unwrap_or(false);
            raw_correct += u64::from(correct);
        }
        assert_eq!(report.points[0].overall.steps_correct, raw_correct);
    }

    #[test]
    fn task_sr_requires_every_benchmarked_step() {
        let (bench, worlds) = benchmark_fixture(&[4], BenchmarkSizes { step: 6, outcome: 0 }, 21);
        let exact = OracleRouter::from_worlds(&worlds, OracleConfig::exact(2)).expect("oracles");

        // Sabotage one screen: propose only a stalling wait there.
        struct Sabotaged<'a> {
            inner: &'a OracleRouter,
            victim: String,
        }
        impl PolicyBackend for Sabotaged<'_> {
            fn propose(
                &self,
                goal: &str,
                observation: &Observation,
                history: &[String],
                k: usize,
            ) -> Result<PolicyProposal, BackendError> {
                if observation.screenshot.digest == self.victim {
                    return Ok(PolicyProposal::from_candidates(
                        vec![Action::wait(1.0, "stall")],
                        k,
                    ));
                }
                self.inner.propose(goal, observation, history, k)
            }
        }

        let victim = bench.step_pairs[0].observation.screenshot.digest.clone();
        let sabotaged = Sabotaged { inner: &exact, victim };
        let report = best_of_n(&sabotaged, &exact, &bench, &NormalizedEquality, &[10], 0)
            .expect("scaling");
        let point = &report.points[0];

        // Both source tasks traverse the same world, so the sabotaged screen
        // can appear in either; derive the blast radius from the benchmark.
        let hit = |p: &StepPair| {
            p.observation.screenshot.digest == bench.step_pairs[0].observation.screenshot.digest
        };
        let victim_steps = bench.step_pairs.iter().filter(|p| hit(p)).count() as u64;
        let affected: std::collections::BTreeSet<&str> = bench
            .step_pairs
            .iter()
            .filter(|p| hit(p))
            .map(|p| p.task_id.as_str())
            .collect();
        // All-or-nothing must bite: an affected task also has correct steps.
        assert!(bench
            .step_pairs
            .iter()
            .any(|p| affected.contains(p.task_id.as_str()) && !hit(p)));
        assert_eq!(point.overall.steps_correct, point.overall.steps - victim_steps);
        assert!(point.overall.step_sr > 0.0 && point.overall.step_sr < 1.0);
        assert_eq!(point.overall.tasks_correct, point.overall.tasks - affected.len() as u64);
    }
}
