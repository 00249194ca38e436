//! Utility terms, hard constraints and their evaluation over candidate test sets.
//!
//! A candidate is a set of blocks (all utterances of a speaker, or all
//! recordings of a transcript) drawn from a pool. Every term compares the
//! candidate test set against its complement in the pool. Block features
//! are additive counts, so a candidate is summarized by an [`Aggregate`]
//! that moves are applied to in O(block size).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ascent::{build_blocks_with, Block, BlockKind};
use crate::distrib::{jeffreys_from_counts, DemographicMode, KlSettings};
use crate::manifest::{Dataset, Intent};
use crate::textmetrics::{wer_align, wer_rates, AlignmentCounts, BleuWeights, MetricError, UWerParams, MAX_ORDER};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("objective has no terms")]
    NoTerms,

    #[error("term {index} ({kind}): weight must be finite and non-negative, got {weight}")]
    InvalidWeight { index: usize, kind: TermKind, weight: f64 },

    #[error("term {index} ({kind}): parameter `{param}` does not apply to this kind")]
    InapplicableParam { index: usize, kind: TermKind, param: &'static str },

    #[error("term {index} ({kind}): {source}")]
    InvalidParam {
        index: usize,
        kind: TermKind,
        source: MetricError,
    },

    #[error("term {index} ({kind}) requires ASR hypotheses, but the dataset has none")]
    MissingHypotheses { index: usize, kind: TermKind },

    #[error("{0} coverage cannot be required with {1} blocks")]
    CoverageMode(&'static str, BlockKind),

    #[error("candidate references unknown block `{0}`")]
    UnknownBlock(String),

    #[error("pool is empty")]
    EmptyPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    DemographicKl,
    IntentKl,
    LengthKl,
    WerChallenge,
    BleuChallenge,
    NgramOverlap,
}

impl fmt::Display for TermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TermKind::DemographicKl => "demographic_kl",
            TermKind::IntentKl => "intent_kl",
            TermKind::LengthKl => "length_kl",
            TermKind::WerChallenge => "wer_challenge",
            TermKind::BleuChallenge => "bleu_challenge",
            TermKind::NgramOverlap => "ngram_overlap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityTerm {
    pub kind: TermKind,
    pub direction: Direction,
    pub weight: f64,
    /// `wer_challenge` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uwer: Option<UWerParams>,
    /// `bleu_challenge` n-gram weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu_weights: Option<BleuWeights>,
    /// `ngram_overlap` per-order weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_weights: Option<BleuWeights>,
}

impl UtilityTerm {
    pub fn new(kind: TermKind, direction: Direction, weight: f64) -> Self {
        UtilityTerm {
            kind,
            direction,
            weight,
            uwer: None,
            bleu_weights: None,
            order_weights: None,
        }
    }

    pub fn minimize(kind: TermKind, weight: f64) -> Self {
        Self::new(kind, Direction::Minimize, weight)
    }

    pub fn maximize(kind: TermKind, weight: f64) -> Self {
        Self::new(kind, Direction::Maximize, weight)
    }

    fn signed(&self, value: f64) -> f64 {
        match self.direction {
            Direction::Maximize => value,
            Direction::Minimize => -value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    /// Target number of utterances in the test set.
    pub target_size: usize,
    /// Allowed deviation from `target_size`, in utterances. The test set
    /// must be non-empty regardless.
    pub size_tolerance: usize,
    pub disjointness: BlockKind,
    /// Every test transcript must recur in the complement.
    #[serde(default)]
    pub require_full_transcript_coverage: bool,
    /// Every test speaker must recur in the complement.
    #[serde(default)]
    pub require_full_speaker_coverage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub terms: Vec<UtilityTerm>,
    pub constraints: Constraints,
    /// Rescale each term by its value range over sampled feasible candidates.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub kl: KlSettings,
}

impl ObjectiveConfig {
    /// Checks weights, parameters and term applicability.
    pub fn validate(&self, has_hypotheses: bool) -> Result<(), ConfigError> {
        if self.terms.is_empty() {
            return Err(ConfigError::NoTerms);
        }
        for (index, term) in self.terms.iter().enumerate() {
            let kind = term.kind;
            if !(term.weight.is_finite() && term.weight >= 0.0) {
                return Err(ConfigError::InvalidWeight {
                    index,
                    kind,
                    weight: term.weight,
                });
            }
            let inapplicable = |param| ConfigError::InapplicableParam { index, kind, param };
            if term.uwer.is_some() && kind != TermKind::WerChallenge {
                return Err(inapplicable("uwer"));
            }
            if term.bleu_weights.is_some() && kind != TermKind::BleuChallenge {
                return Err(inapplicable("bleu_weights"));
            }
            if term.order_weights.is_some() && kind != TermKind::NgramOverlap {
                return Err(inapplicable("order_weights"));
            }
            if let Some(p) = &term.uwer {
                p.validate()
                    .map_err(|source| ConfigError::InvalidParam { index, kind, source })?;
            }
            for w in [&term.bleu_weights, &term.order_weights].into_iter().flatten() {
                BleuWeights::new(w.as_array())
                    .map_err(|source| ConfigError::InvalidParam { index, kind, source })?;
            }
            if kind == TermKind::WerChallenge && !has_hypotheses {
                return Err(ConfigError::MissingHypotheses { index, kind });
            }
        }
        let c = &self.constraints;
        if c.require_full_transcript_coverage && c.disjointness == BlockKind::Transcript {
            return Err(ConfigError::CoverageMode("transcript", BlockKind::Transcript));
        }
        if c.require_full_speaker_coverage && c.disjointness == BlockKind::Speaker {
            return Err(ConfigError::CoverageMode("speaker", BlockKind::Speaker));
        }
        Ok(())
    }
}

/// Test blocks and the remaining eligible blocks, by block id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSplit {
    pub test: BTreeSet<String>,
    pub complement: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    SizeOutOfRange {
        size: usize,
        target: usize,
        tolerance: usize,
    },
    TranscriptNotCovered(String),
    SpeakerNotCovered(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SizeOutOfRange {
                size,
                target,
                tolerance,
            } if *size == 0 => write!(f, "test set is empty (target {target}±{tolerance})"),
            Violation::SizeOutOfRange {
                size,
                target,
                tolerance,
            } => write!(f, "test size {size} outside {target}±{tolerance}"),
            Violation::TranscriptNotCovered(t) => {
                write!(f, "transcript `{t}` does not recur outside the test set")
            }
            Violation::SpeakerNotCovered(s) => {
                write!(f, "speaker `{s}` does not recur outside the test set")
            }
        }
    }
}

/// Per-utterance categorical features, indexed once per dataset.
#[derive(Debug, Clone)]
pub struct DatasetFeatures {
    pub speaker_ids: Vec<String>,
    pub speaker_of: Vec<u32>,
    pub transcript_keys: Vec<String>,
    pub transcript_tokens: Vec<Vec<String>>,
    pub transcript_of: Vec<u32>,
    pub intents: Vec<Intent>,
    pub intent_of: Vec<u32>,
    pub lengths: Vec<usize>,
    pub length_of: Vec<u32>,
    pub alignment_of: Vec<Option<AlignmentCounts>>,
    /// Joint demographic category of each speaker.
    pub demographic_of: Vec<u32>,
    pub demographic_categories: usize,
    /// Per attribute, the category of each speaker.
    pub marginal_of: Vec<Vec<u32>>,
    pub marginal_categories: Vec<usize>,
}

fn index_of<K: Ord + Clone>(values: impl Iterator<Item = K>) -> BTreeMap<K, u32> {
    let set: BTreeSet<K> = values.collect();
    set.into_iter().enumerate().map(|(i, k)| (k, i as u32)).collect()
}

impl DatasetFeatures {
    pub fn new(dataset: &Dataset) -> Self {
        let records = dataset.records();
        let speaker_ids: Vec<String> = dataset.speaker_index().keys().cloned().collect();
        let speaker_pos: HashMap<&str, u32> = speaker_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        let transcript_keys: Vec<String> = dataset.transcript_index().keys().cloned().collect();
        let transcript_pos: HashMap<&str, u32> = transcript_keys
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let intent_pos = index_of(records.iter().map(|r| r.intent.clone()));
        let length_pos = index_of(records.iter().map(|r| r.tokens.len()));

        let attrs = dataset.attribute_names();
        let tuples: Vec<Vec<String>> = speaker_ids
            .iter()
            .map(|s| dataset.profile(s).expect("profile for every speaker").tuple(attrs))
            .collect();
        let joint = index_of(tuples.iter().cloned());
        let mut marginal_of = Vec::with_capacity(attrs.len());
        let mut marginal_categories = Vec::with_capacity(attrs.len());
        for a in 0..attrs.len() {
            let idx = index_of(tuples.iter().map(|t| t[a].clone()));
            marginal_categories.push(idx.len());
            marginal_of.push(tuples.iter().map(|t| idx[&t[a]]).collect());
        }

        DatasetFeatures {
            speaker_of: records.iter().map(|r| speaker_pos[r.speaker_id.as_str()]).collect(),
            transcript_of: records
                .iter()
                .map(|r| transcript_pos[r.normalized().as_str()])
                .collect(),
            transcript_tokens: transcript_keys
                .iter()
                .map(|k| k.split(' ').map(str::to_owned).collect())
                .collect(),
            intent_of: records.iter().map(|r| intent_pos[&r.intent]).collect(),
            intents: intent_pos.keys().cloned().collect(),
            length_of: records.iter().map(|r| length_pos[&r.tokens.len()]).collect(),
            lengths: length_pos.keys().copied().collect(),
            alignment_of: records
                .iter()
                .map(|r| {
                    r.hypothesis_tokens
                        .as_ref()
                        .map(|h| wer_align(&r.tokens, h).expect("validated non-empty transcript"))
                })
                .collect(),
            demographic_of: tuples.iter().map(|t| joint[t]).collect(),
            demographic_categories: joint.len(),
            marginal_of,
            marginal_categories,
            speaker_ids,
            transcript_keys,
        }
    }
}

/// Additive summary of a set of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub size: usize,
    pub speakers: Vec<u32>,
    pub transcripts: Vec<u32>,
    pub intents: Vec<u32>,
    pub lengths: Vec<u32>,
    pub alignment: AlignmentCounts,
    pub hypothesis_utterances: usize,
}

impl Aggregate {
    pub fn empty(features: &DatasetFeatures) -> Self {
        Aggregate {
            size: 0,
            speakers: vec![0; features.speaker_ids.len()],
            transcripts: vec![0; features.transcript_keys.len()],
            intents: vec![0; features.intents.len()],
            lengths: vec![0; features.lengths.len()],
            alignment: AlignmentCounts::default(),
            hypothesis_utterances: 0,
        }
    }

    pub fn of_utterances(features: &DatasetFeatures, utterances: impl IntoIterator<Item = usize>) -> Self {
        let mut agg = Self::empty(features);
        for u in utterances {
            agg.size += 1;
            agg.speakers[features.speaker_of[u] as usize] += 1;
            agg.transcripts[features.transcript_of[u] as usize] += 1;
            agg.intents[features.intent_of[u] as usize] += 1;
            agg.lengths[features.length_of[u] as usize] += 1;
            if let Some(a) = features.alignment_of[u] {
                agg.alignment += a;
                agg.hypothesis_utterances += 1;
            }
        }
        agg
    }

    pub fn add(&mut self, block: &Block) {
        let f = &block.features;
        self.size += block.members.len();
        for &(i, c) in &f.speakers {
            self.speakers[i as usize] += c;
        }
        for &(i, c) in &f.transcripts {
            self.transcripts[i as usize] += c;
        }
        for &(i, c) in &f.intents {
            self.intents[i as usize] += c;
        }
        for &(i, c) in &f.lengths {
            self.lengths[i as usize] += c;
        }
        self.alignment += f.alignment;
        self.hypothesis_utterances += f.hypothesis_utterances;
    }

    pub fn remove(&mut self, block: &Block) {
        let f = &block.features;
        self.size -= block.members.len();
        for &(i, c) in &f.speakers {
            self.speakers[i as usize] -= c;
        }
        for &(i, c) in &f.transcripts {
            self.transcripts[i as usize] -= c;
        }
        for &(i, c) in &f.intents {
            self.intents[i as usize] -= c;
        }
        for &(i, c) in &f.lengths {
            self.lengths[i as usize] -= c;
        }
        self.alignment.substitutions -= f.alignment.substitutions;
        self.alignment.insertions -= f.alignment.insertions;
        self.alignment.deletions -= f.alignment.deletions;
        self.alignment.reference_length -= f.alignment.reference_length;
        self.hypothesis_utterances -= f.hypothesis_utterances;
    }
}

/// n-gram index over distinct transcripts for BLEU-style terms.
#[derive(Debug, Clone)]
struct GramIndex {
    /// Per transcript, per order: (gram id, count).
    grams: Vec<[Vec<(u32, u32)>; MAX_ORDER]>,
    /// Per gram id: (transcript, count).
    owners: Vec<Vec<(u32, u32)>>,
}

impl GramIndex {
    fn new(transcripts: &[Vec<String>]) -> Self {
        let mut ids: HashMap<&[String], u32> = HashMap::new();
        let mut owners: Vec<Vec<(u32, u32)>> = Vec::new();
        let mut grams = Vec::with_capacity(transcripts.len());
        for (t, tokens) in transcripts.iter().enumerate() {
            let mut per_order: [Vec<(u32, u32)>; MAX_ORDER] = Default::default();
            for (order, slot) in (1..=MAX_ORDER).zip(per_order.iter_mut()) {
                let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
                for gram in tokens.windows(order) {
                    let next = ids.len() as u32;
                    let id = *ids.entry(gram).or_insert_with(|| {
                        owners.push(Vec::new());
                        next
                    });
                    *counts.entry(id).or_insert(0) += 1;
                }
                for (&id, &c) in &counts {
                    owners[id as usize].push((t as u32, c));
                }
                *slot = counts.into_iter().collect();
            }
            grams.push(per_order);
        }
        GramIndex { grams, owners }
    }

    /// Clipped matches and total n-grams of `transcript` against the
    /// transcripts flagged in `in_reference`.
    fn precision(&self, transcript: usize, order: usize, in_reference: &[bool]) -> (u32, u32) {
        let mut matched = 0;
        let mut total = 0;
        for &(gram, count) in &self.grams[transcript][order - 1] {
            total += count;
            let max_ref = self.owners[gram as usize]
                .iter()
                .filter(|(t, _)| in_reference[*t as usize])
                .map(|&(_, c)| c)
                .max()
                .unwrap_or(0);
            matched += count.min(max_ref);
        }
        (matched, total)
    }
}

/// A fully prepared optimization problem for one stage: eligible blocks,
/// pool totals and the objective.
#[derive(Debug, Clone)]
pub struct Problem {
    label: String,
    features: DatasetFeatures,
    blocks: Vec<Block>,
    pool: Aggregate,
    config: ObjectiveConfig,
    grams: GramIndex,
    scales: Vec<f64>,
}

impl Problem {
    /// `pool` is every utterance the stage partitions; `eligible` is the
    /// subset that may be moved into the test set, grouped into blocks.
    pub fn new(
        label: impl Into<String>,
        dataset: &Dataset,
        pool: &BTreeSet<usize>,
        eligible: &BTreeSet<usize>,
        config: ObjectiveConfig,
    ) -> Result<Self, ConfigError> {
        config.validate(dataset.has_hypotheses())?;
        if pool.is_empty() {
            return Err(ConfigError::EmptyPool);
        }
        let features = DatasetFeatures::new(dataset);
        let blocks = build_blocks_with(dataset, &features, config.constraints.disjointness, eligible);
        let pool_agg = Aggregate::of_utterances(&features, pool.iter().copied());
        let grams = GramIndex::new(&features.transcript_tokens);
        let scales = vec![1.0; config.terms.len()];
        Ok(Problem {
            label: label.into(),
            features,
            blocks,
            pool: pool_agg,
            config,
            grams,
            scales,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    pub fn features(&self) -> &DatasetFeatures {
        &self.features
    }

    pub fn pool(&self) -> &Aggregate {
        &self.pool
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn with_scales(mut self, scales: Vec<f64>) -> Self {
        assert_eq!(scales.len(), self.config.terms.len());
        self.scales = scales;
        self
    }

    pub fn empty_aggregate(&self) -> Aggregate {
        Aggregate::empty(&self.features)
    }

    /// Aggregate of the blocks flagged in `in_test`.
    pub fn aggregate(&self, in_test: &[bool]) -> Aggregate {
        let mut agg = self.empty_aggregate();
        for (block, _) in self.blocks.iter().zip(in_test).filter(|(_, &t)| t) {
            agg.add(block);
        }
        agg
    }

    pub fn selection_of(&self, candidate: &CandidateSplit) -> Result<Vec<bool>, ConfigError> {
        let known: BTreeSet<&str> = self.blocks.iter().map(|b| b.id.as_str()).collect();
        if let Some(unknown) = candidate
            .test
            .iter()
            .chain(&candidate.complement)
            .find(|id| !known.contains(id.as_str()))
        {
            return Err(ConfigError::UnknownBlock(unknown.clone()));
        }
        Ok(self
            .blocks
            .iter()
            .map(|b| candidate.test.contains(&b.id))
            .collect())
    }

    pub fn candidate_of(&self, in_test: &[bool]) -> CandidateSplit {
        let mut candidate = CandidateSplit::default();
        for (block, &t) in self.blocks.iter().zip(in_test) {
            if t {
                candidate.test.insert(block.id.clone());
            } else {
                candidate.complement.insert(block.id.clone());
            }
        }
        candidate
    }

    fn size_ok(&self, size: usize) -> bool {
        let c = &self.config.constraints;
        size > 0 && size.abs_diff(c.target_size) <= c.size_tolerance
    }

    /// Whether the size fits and every required coverage holds.
    pub fn is_feasible(&self, test: &Aggregate) -> bool {
        self.size_ok(test.size) && self.coverage_ok(test)
    }

    /// Coverage constraints alone; these only get worse as blocks are added.
    pub fn coverage_ok(&self, test: &Aggregate) -> bool {
        let c = &self.config.constraints;
        let recurs = |t: &[u32], p: &[u32]| t.iter().zip(p).all(|(&t, &p)| t == 0 || p > t);
        (!c.require_full_transcript_coverage || recurs(&test.transcripts, &self.pool.transcripts))
            && (!c.require_full_speaker_coverage || recurs(&test.speakers, &self.pool.speakers))
    }

    pub fn violations(&self, test: &Aggregate) -> Vec<Violation> {
        let c = &self.config.constraints;
        let mut out = Vec::new();
        if !self.size_ok(test.size) {
            out.push(Violation::SizeOutOfRange {
                size: test.size,
                target: c.target_size,
                tolerance: c.size_tolerance,
            });
        }
        if c.require_full_transcript_coverage {
            for (i, (&t, &p)) in test.transcripts.iter().zip(&self.pool.transcripts).enumerate() {
                if t > 0 && p <= t {
                    out.push(Violation::TranscriptNotCovered(self.features.transcript_keys[i].clone()));
                }
            }
        }
        if c.require_full_speaker_coverage {
            for (i, (&t, &p)) in test.speakers.iter().zip(&self.pool.speakers).enumerate() {
                if t > 0 && p <= t {
                    out.push(Violation::SpeakerNotCovered(self.features.speaker_ids[i].clone()));
                }
            }
        }
        out
    }

    fn complement_counts(test: &[u32], pool: &[u32]) -> Vec<f64> {
        test.iter().zip(pool).map(|(&t, &p)| (p - t) as f64).collect()
    }

    fn kl_between(&self, test: &[u32], pool: &[u32]) -> f64 {
        let a: Vec<f64> = test.iter().map(|&c| c as f64).collect();
        let b = Self::complement_counts(test, pool);
        jeffreys_from_counts(&a, &b, self.config.kl.epsilon)
    }

    fn demographic_kl(&self, test: &Aggregate) -> f64 {
        let f = &self.features;
        let present = |s: usize| (test.speakers[s] > 0, self.pool.speakers[s] > test.speakers[s]);
        let eps = self.config.kl.epsilon;
        let divergence = |category_of: &[u32], categories: usize| {
            let mut a = vec![0.0; categories];
            let mut b = vec![0.0; categories];
            for (s, &cat) in category_of.iter().enumerate() {
                let (in_test, in_rest) = present(s);
                if in_test {
                    a[cat as usize] += 1.0;
                }
                if in_rest {
                    b[cat as usize] += 1.0;
                }
            }
            jeffreys_from_counts(&a, &b, eps)
        };
        match self.config.kl.demographic_mode {
            DemographicMode::Joint => divergence(&f.demographic_of, f.demographic_categories),
            DemographicMode::Marginal => f
                .marginal_of
                .iter()
                .zip(&f.marginal_categories)
                .map(|(of, &n)| divergence(of, n))
                .sum(),
        }
    }

    fn wer_challenge(&self, test: &Aggregate, params: &UWerParams) -> f64 {
        match wer_rates(&test.alignment) {
            Ok(rates) => crate::textmetrics::u_wer(&rates, params),
            Err(_) => 0.0,
        }
    }

    fn distinct(test: &Aggregate, pool: &Aggregate) -> (Vec<usize>, Vec<bool>) {
        let in_test = test
            .transcripts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i)
            .collect();
        let in_rest = test
            .transcripts
            .iter()
            .zip(&pool.transcripts)
            .map(|(&t, &p)| p > t)
            .collect();
        (in_test, in_rest)
    }

    /// Mean negated sentence BLEU of each distinct test transcript against
    /// the distinct complement transcripts.
    fn bleu_challenge(&self, test: &Aggregate, weights: &BleuWeights) -> f64 {
        let (test_transcripts, in_rest) = Self::distinct(test, &self.pool);
        if test_transcripts.is_empty() {
            return 0.0;
        }
        let rest_lengths: BTreeSet<usize> = in_rest
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| self.features.transcript_tokens[i].len())
            .collect();
        if rest_lengths.is_empty() {
            return 0.0;
        }
        let w = weights.as_array();
        let mut sum = 0.0;
        for &t in &test_transcripts {
            let c = self.features.transcript_tokens[t].len();
            let mut log_sum = 0.0;
            let mut zero = false;
            for order in 1..=MAX_ORDER {
                if w[order - 1] == 0.0 {
                    continue;
                }
                let (matched, total) = self.grams.precision(t, order, &in_rest);
                if matched == 0 || total == 0 {
                    zero = true;
                    break;
                }
                log_sum += w[order - 1] * (matched as f64 / total as f64).ln();
            }
            if zero {
                continue;
            }
            let r = rest_lengths
                .iter()
                .copied()
                .min_by_key(|&r| (r.abs_diff(c), r))
                .expect("non-empty");
            let brevity = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
            sum -= brevity * log_sum.exp();
        }
        sum / test_transcripts.len() as f64
    }

    /// Weighted mean per-order modified precision (fraction) of the distinct
    /// test transcripts against the complement; orders no transcript reaches
    /// are skipped.
    fn ngram_overlap(&self, test: &Aggregate, weights: &BleuWeights) -> f64 {
        let (test_transcripts, in_rest) = Self::distinct(test, &self.pool);
        let mut value = 0.0;
        let mut used_weight = 0.0;
        for (order, &w) in (1..=MAX_ORDER).zip(weights.as_array().iter()) {
            if w == 0.0 {
                continue;
            }
            let mut sum = 0.0;
            let mut n = 0usize;
            for &t in &test_transcripts {
                if self.features.transcript_tokens[t].len() < order {
                    continue;
                }
                let (matched, total) = self.grams.precision(t, order, &in_rest);
                sum += matched as f64 / total as f64;
                n += 1;
            }
            if n > 0 {
                value += w * sum / n as f64;
                used_weight += w;
            }
        }
        if used_weight > 0.0 {
            value / used_weight
        } else {
            1.0
        }
    }

    /// Raw (unsigned, unscaled) value of every term.
    pub fn term_values(&self, test: &Aggregate) -> Vec<f64> {
        self.config
            .terms
            .iter()
            .map(|term| match term.kind {
                TermKind::DemographicKl => self.demographic_kl(test),
                TermKind::IntentKl => self.kl_between(&test.intents, &self.pool.intents),
                TermKind::LengthKl => self.kl_between(&test.lengths, &self.pool.lengths),
                TermKind::WerChallenge => {
                    self.wer_challenge(test, &term.uwer.unwrap_or_default())
                }
                TermKind::BleuChallenge => self.bleu_challenge(
                    test,
                    &term.bleu_weights.unwrap_or_else(BleuWeights::unigram_bigram),
                ),
                TermKind::NgramOverlap => self.ngram_overlap(
                    test,
                    &term.order_weights.unwrap_or_else(BleuWeights::uniform),
                ),
            })
            .collect()
    }

    /// `Σ weight · scale · signed(value)`.
    pub fn score(&self, test: &Aggregate) -> f64 {
        self.config
            .terms
            .iter()
            .zip(self.term_values(test))
            .zip(&self.scales)
            .filter(|((term, _), _)| term.weight != 0.0)
            .map(|((term, value), scale)| term.weight * scale * term.signed(value))
            .sum()
    }
}

/// Scores `candidate` under `config`; the pool is the union of its test and
/// complement blocks.
pub fn evaluate(
    candidate: &CandidateSplit,
    dataset: &Dataset,
    config: &ObjectiveConfig,
) -> crate::Result<f64> {
    let problem = problem_for(candidate, dataset, config)?;
    let selection = problem.selection_of(candidate)?;
    Ok(problem.score(&problem.aggregate(&selection)))
}

/// Lists every hard-constraint violation of `candidate`.
pub fn check_constraints(
    candidate: &CandidateSplit,
    dataset: &Dataset,
    config: &ObjectiveConfig,
) -> crate::Result<Result<(), Vec<Violation>>> {
    let problem = problem_for(candidate, dataset, config)?;
    let selection = problem.selection_of(candidate)?;
    let violations = problem.violations(&problem.aggregate(&selection));
    Ok(if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    })
}

fn problem_for(
    candidate: &CandidateSplit,
    dataset: &Dataset,
    config: &ObjectiveConfig,
) -> crate::Result<Problem> {
    let kind = config.constraints.disjointness;
    let mut pool = BTreeSet::new();
    for id in candidate.test.iter().chain(&candidate.complement) {
        let members = match kind {
            BlockKind::Speaker => dataset.speaker_index().get(id),
            BlockKind::Transcript => dataset.transcript_index().get(id),
        }
        .ok_or_else(|| ConfigError::UnknownBlock(id.clone()))?;
        pool.extend(members.iter().copied());
    }
    Ok(Problem::new("evaluate", dataset, &pool, &pool, config.clone())?)
}
