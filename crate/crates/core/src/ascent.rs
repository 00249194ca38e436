//! Coordinate ascent over block-to-test-set assignments.
//!
//! Each coordinate is one block's membership in the test set. A pass visits
//! every block in a freshly shuffled order and tries, in order, swaps with
//! blocks on the other side and then adding/removing the block itself. Only
//! moves that keep every hard constraint and strictly raise the score are
//! accepted, so each restart terminates. Restarts run independently from
//! their own PRNG stream and may run in parallel.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{map_indexed, Execution};
use crate::manifest::Dataset;
use crate::objective::{Aggregate, CandidateSplit, DatasetFeatures, Problem};
use crate::textmetrics::AlignmentCounts;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "speaker_block", alias = "speaker")]
    Speaker,
    #[serde(rename = "transcript_block", alias = "transcript")]
    Transcript,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Speaker => "speaker",
            BlockKind::Transcript => "transcript",
        })
    }
}

/// Sparse per-block counts over the dataset's feature indexes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockFeatures {
    pub speakers: Vec<(u32, u32)>,
    pub transcripts: Vec<(u32, u32)>,
    pub intents: Vec<(u32, u32)>,
    pub lengths: Vec<(u32, u32)>,
    pub alignment: AlignmentCounts,
    pub hypothesis_utterances: usize,
}

/// Atomic unit of assignment: every pool utterance of one speaker, or every
/// pool recording of one normalized transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub id: String,
    pub kind: BlockKind,
    pub members: Vec<usize>,
    pub features: BlockFeatures,
}

impl Block {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

fn sparse(counts: BTreeMap<u32, u32>) -> Vec<(u32, u32)> {
    counts.into_iter().collect()
}

pub(crate) fn build_blocks_with(
    dataset: &Dataset,
    features: &DatasetFeatures,
    kind: BlockKind,
    pool: &BTreeSet<usize>,
) -> Vec<Block> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &u in pool {
        let record = dataset.record(u);
        let key = match kind {
            BlockKind::Speaker => record.speaker_id.clone(),
            BlockKind::Transcript => record.normalized(),
        };
        groups.entry(key).or_default().push(u);
    }
    groups
        .into_iter()
        .map(|(id, members)| {
            let mut speakers = BTreeMap::new();
            let mut transcripts = BTreeMap::new();
            let mut intents = BTreeMap::new();
            let mut lengths = BTreeMap::new();
            let mut alignment = AlignmentCounts::default();
            let mut hypothesis_utterances = 0;
            for &u in &members {
                *speakers.entry(features.speaker_of[u]).or_insert(0) += 1;
                *transcripts.entry(features.transcript_of[u]).or_insert(0) += 1;
                *intents.entry(features.intent_of[u]).or_insert(0) += 1;
                *lengths.entry(features.length_of[u]).or_insert(0) += 1;
                if let Some(a) = features.alignment_of[u] {
                    alignment += a;
                    hypothesis_utterances += 1;
                }
            }
            Block {
                id,
                kind,
                members,
                features: BlockFeatures {
                    speakers: sparse(speakers),
                    transcripts: sparse(transcripts),
                    intents: sparse(intents),
                    lengths: sparse(lengths),
                    alignment,
                    hypothesis_utterances,
                },
            }
        })
        .collect()
}

/// Groups `pool` into blocks of `kind`, in block-id order, with features precomputed.
pub fn build_blocks(dataset: &Dataset, kind: BlockKind, pool: &BTreeSet<usize>) -> Vec<Block> {
    build_blocks_with(dataset, &DatasetFeatures::new(dataset), kind, pool)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveStrategy {
    /// Accept the first improving move found for a coordinate.
    #[default]
    FirstImprovement,
    /// Evaluate every move for a coordinate and take the best.
    BestImprovement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentOptions {
    pub restarts: usize,
    pub max_passes: usize,
    #[serde(default)]
    pub strategy: MoveStrategy,
    #[serde(default)]
    pub execution: Execution,
    /// Record every accepted move.
    #[serde(default)]
    pub record_trace: bool,
    /// Cross-check incremental aggregates against full recomputation.
    #[serde(default = "debug_default")]
    pub debug_checks: bool,
}

fn debug_default() -> bool {
    cfg!(debug_assertions)
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            restarts: 5,
            max_passes: 50,
            strategy: MoveStrategy::FirstImprovement,
            execution: Execution::Parallel,
            record_trace: false,
            debug_checks: debug_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Move {
    Init,
    Swap { out: String, into: String },
    Add { block: String },
    Remove { block: String },
}

/// One line of the ascent trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub restart: usize,
    pub pass: usize,
    #[serde(rename = "move")]
    pub step: usize,
    pub score: f64,
    pub action: Move,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub initial_score: f64,
    pub final_score: f64,
    pub passes: usize,
    pub accepted_moves: usize,
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub best: CandidateSplit,
    pub best_selection: Vec<bool>,
    pub best_score: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
    pub trace: Vec<TraceEvent>,
}

/// Mutable state of one restart.
#[derive(Debug, Clone)]
pub struct AscentState {
    pub in_test: Vec<bool>,
    pub aggregate: Aggregate,
    pub score: f64,
    pub pass: usize,
    pub accepted_moves: usize,
    rng: ChaCha8Rng,
}

fn restart_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn infeasible(problem: &Problem, constraint: String) -> Error {
    Error::Infeasible {
        stage: problem.label().to_owned(),
        constraint,
    }
}

fn greedy_fill(problem: &Problem, rng: &mut ChaCha8Rng) -> Result<(Vec<bool>, Aggregate)> {
    let c = &problem.config().constraints;
    let pool_size = problem.pool().size;
    if c.target_size >= pool_size {
        return Err(infeasible(
            problem,
            format!(
                "target test size {} is not below the pool size {pool_size}",
                c.target_size
            ),
        ));
    }
    let blocks = problem.blocks();
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(rng);

    let upper = c.target_size + c.size_tolerance;
    let mut in_test = vec![false; blocks.len()];
    let mut agg = problem.empty_aggregate();
    let mut excluded_by_coverage = 0usize;
    for b in order {
        if agg.size >= c.target_size {
            break;
        }
        if agg.size + blocks[b].size() > upper {
            continue;
        }
        agg.add(&blocks[b]);
        if problem.coverage_ok(&agg) {
            in_test[b] = true;
        } else {
            agg.remove(&blocks[b]);
            excluded_by_coverage += 1;
        }
    }
    if !problem.is_feasible(&agg) {
        let reason = if excluded_by_coverage > 0 {
            let which = if c.require_full_transcript_coverage {
                "full transcript coverage"
            } else {
                "full speaker coverage"
            };
            format!(
                "{which}: {excluded_by_coverage} blocks are unusable and the rest reach only {} of {}±{} utterances",
                agg.size, c.target_size, c.size_tolerance
            )
        } else {
            format!(
                "test size: {} eligible {} blocks cannot reach {}±{} utterances (reached {})",
                blocks.len(),
                c.disjointness,
                c.target_size,
                c.size_tolerance,
                agg.size
            )
        };
        return Err(infeasible(problem, reason));
    }
    Ok((in_test, agg))
}

/// Random greedy fill from the restart-0 stream of `seed`.
pub fn initialize(problem: &Problem, seed: u64) -> Result<CandidateSplit> {
    let (in_test, _) = greedy_fill(problem, &mut restart_rng(seed, 0))?;
    Ok(problem.candidate_of(&in_test))
}

impl AscentState {
    fn new(problem: &Problem, seed: u64, restart: usize) -> Result<Self> {
        let mut rng = restart_rng(seed, restart as u64);
        let (in_test, aggregate) = greedy_fill(problem, &mut rng)?;
        let score = problem.score(&aggregate);
        Ok(AscentState {
            in_test,
            aggregate,
            score,
            pass: 0,
            accepted_moves: 0,
            rng,
        })
    }

    fn check(&self, problem: &Problem) {
        let fresh = problem.aggregate(&self.in_test);
        assert_eq!(fresh, self.aggregate, "incremental aggregate drifted");
        assert_eq!(problem.score(&fresh).to_bits(), self.score.to_bits());
        assert!(problem.is_feasible(&fresh), "accepted an infeasible candidate");
    }
}

/// Candidate move from the point of view of one coordinate.
#[derive(Debug, Clone, Copy)]
enum Step {
    Swap { out: usize, into: usize },
    Toggle(usize),
}

impl Step {
    fn apply(self, problem: &Problem, in_test: &mut [bool], agg: &mut Aggregate) {
        let blocks = problem.blocks();
        match self {
            Step::Swap { out, into } => {
                agg.remove(&blocks[out]);
                agg.add(&blocks[into]);
                in_test[out] = false;
                in_test[into] = true;
            }
            Step::Toggle(b) => {
                if in_test[b] {
                    agg.remove(&blocks[b]);
                } else {
                    agg.add(&blocks[b]);
                }
                in_test[b] = !in_test[b];
            }
        }
    }

    fn revert(self, problem: &Problem, in_test: &mut [bool], agg: &mut Aggregate) {
        match self {
            Step::Swap { out, into } => Step::Swap { out: into, into: out }.apply(problem, in_test, agg),
            Step::Toggle(_) => self.apply(problem, in_test, agg),
        }
    }

    fn resulting_size(self, problem: &Problem, in_test: &[bool], size: usize) -> usize {
        let blocks = problem.blocks();
        match self {
            Step::Swap { out, into } => size - blocks[out].size() + blocks[into].size(),
            Step::Toggle(b) if in_test[b] => size - blocks[b].size(),
            Step::Toggle(b) => size + blocks[b].size(),
        }
    }

    fn describe(self, problem: &Problem, was_in_test: bool) -> Move {
        let id = |b: usize| problem.blocks()[b].id.clone();
        match self {
            Step::Swap { out, into } => Move::Swap {
                out: id(out),
                into: id(into),
            },
            Step::Toggle(b) if was_in_test => Move::Remove { block: id(b) },
            Step::Toggle(b) => Move::Add { block: id(b) },
        }
    }
}

fn size_fits(problem: &Problem, size: usize) -> bool {
    let c = &problem.config().constraints;
    size.abs_diff(c.target_size) <= c.size_tolerance
}

/// Score after `step`, or `None` if it breaks a constraint.
fn try_step(problem: &Problem, state: &mut AscentState, step: Step) -> Option<f64> {
    if !size_fits(problem, step.resulting_size(problem, &state.in_test, state.aggregate.size)) {
        return None;
    }
    step.apply(problem, &mut state.in_test, &mut state.aggregate);
    let result = problem
        .coverage_ok(&state.aggregate)
        .then(|| problem.score(&state.aggregate));
    step.revert(problem, &mut state.in_test, &mut state.aggregate);
    result
}

fn score_detached(problem: &Problem, state: &AscentState, step: Step) -> Option<f64> {
    if !size_fits(problem, step.resulting_size(problem, &state.in_test, state.aggregate.size)) {
        return None;
    }
    let mut in_test = state.in_test.clone();
    let mut agg = state.aggregate.clone();
    step.apply(problem, &mut in_test, &mut agg);
    problem.coverage_ok(&agg).then(|| problem.score(&agg))
}

fn coordinate_steps(state: &mut AscentState, b: usize) -> Vec<Step> {
    let inside = state.in_test[b];
    let mut partners: Vec<usize> = (0..state.in_test.len())
        .filter(|&p| p != b && state.in_test[p] != inside)
        .collect();
    partners.shuffle(&mut state.rng);
    let mut steps: Vec<Step> = partners
        .into_iter()
        .map(|p| {
            if inside {
                Step::Swap { out: b, into: p }
            } else {
                Step::Swap { out: p, into: b }
            }
        })
        .collect();
    steps.push(Step::Toggle(b));
    steps
}

fn best_step(
    problem: &Problem,
    state: &AscentState,
    steps: &[Step],
    execution: Execution,
) -> Option<(Step, f64)> {
    let scores = map_indexed(steps.len(), execution, |i| score_detached(problem, state, steps[i]));
    let mut best: Option<(Step, f64)> = None;
    for (step, score) in steps.iter().zip(scores) {
        if let Some(s) = score {
            if s > state.score && best.is_none_or(|(_, b)| s > b) {
                best = Some((*step, s));
            }
        }
    }
    best
}

fn run_restart(
    problem: &Problem,
    seed: u64,
    restart: usize,
    options: &AscentOptions,
    inner: Execution,
) -> Result<(AscentState, RestartSummary, Vec<TraceEvent>)> {
    let mut state = AscentState::new(problem, seed, restart)?;
    let initial_score = state.score;
    let mut trace = Vec::new();
    if options.record_trace {
        trace.push(TraceEvent {
            restart,
            pass: 0,
            step: 0,
            score: state.score,
            action: Move::Init,
        });
    }
    if options.debug_checks {
        state.check(problem);
    }

    while state.pass < options.max_passes {
        state.pass += 1;
        let mut order: Vec<usize> = (0..problem.blocks().len()).collect();
        order.shuffle(&mut state.rng);
        let mut improved = false;

        for b in order {
            let steps = coordinate_steps(&mut state, b);
            let chosen = match options.strategy {
                MoveStrategy::FirstImprovement => steps.iter().find_map(|&step| {
                    try_step(problem, &mut state, step)
                        .filter(|&s| s > state.score)
                        .map(|s| (step, s))
                }),
                MoveStrategy::BestImprovement => best_step(problem, &state, &steps, inner),
            };
            let Some((step, score)) = chosen else {
                continue;
            };
            let was_in_test = state.in_test[b];
            step.apply(problem, &mut state.in_test, &mut state.aggregate);
            debug_assert!(score > state.score);
            state.score = score;
            state.accepted_moves += 1;
            improved = true;
            if options.debug_checks {
                state.check(problem);
            }
            if options.record_trace {
                trace.push(TraceEvent {
                    restart,
                    pass: state.pass,
                    step: state.accepted_moves,
                    score,
                    action: step.describe(problem, was_in_test),
                });
            }
        }
        if !improved {
            break;
        }
    }

    let summary = RestartSummary {
        initial_score,
        final_score: state.score,
        passes: state.pass,
        accepted_moves: state.accepted_moves,
    };
    Ok((state, summary, trace))
}

/// Per-term scale `1 / (max - min)` over a sample of random feasible
/// candidates; terms that never vary keep scale 1.
pub fn calibrate_scales(problem: &Problem, seed: u64, samples: usize) -> Vec<f64> {
    let n = problem.config().terms.len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for k in 0..samples {
        let mut rng = restart_rng(seed, u64::MAX - k as u64);
        if let Ok((_, agg)) = greedy_fill(problem, &mut rng) {
            for (i, v) in problem.term_values(&agg).into_iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
    }
    lo.iter()
        .zip(&hi)
        .map(|(&l, &h)| if h - l > 1e-12 { 1.0 / (h - l) } else { 1.0 })
        .collect()
}

const CALIBRATION_SAMPLES: usize = 32;

/// Runs `options.restarts` independent ascents and returns the best result;
/// ties go to the lowest restart index.
pub fn run_ascent(problem: &Problem, seed: u64, options: &AscentOptions) -> Result<AscentOutcome> {
    let calibrated;
    let problem = if problem.config().normalize {
        calibrated = problem
            .clone()
            .with_scales(calibrate_scales(problem, seed, CALIBRATION_SAMPLES));
        &calibrated
    } else {
        problem
    };
    let restarts = options.restarts.max(1);
    // fan out across restarts; within a restart stay sequential unless there is only one
    let (outer, inner) = if restarts > 1 {
        (options.execution, Execution::Sequential)
    } else {
        (Execution::Sequential, options.execution)
    };
    let results = map_indexed(restarts, outer, |r| run_restart(problem, seed, r, options, inner));

    let mut best: Option<(usize, AscentState)> = None;
    let mut summaries = Vec::with_capacity(restarts);
    let mut trace = Vec::new();
    let mut first_error = None;
    for (r, result) in results.into_iter().enumerate() {
        match result {
            Ok((state, summary, events)) => {
                summaries.push(summary);
                trace.extend(events);
                if best.as_ref().is_none_or(|(_, b)| state.score > b.score) {
                    best = Some((r, state));
                }
            }
            Err(e) => {
                log::debug!("restart {r} failed to initialize: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    let Some((best_restart, state)) = best else {
        return Err(first_error.expect("at least one restart"));
    };
    Ok(AscentOutcome {
        best: problem.candidate_of(&state.in_test),
        best_score: state.score,
        best_selection: state.in_test,
        best_restart,
        restarts: summaries,
        trace,
    })
}
