//! End-to-end split construction: held-out speakers, then held-out
//! transcripts, then a stratified train/valid split of the remainder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ascent::{run_ascent, AscentOptions, BlockKind, MoveStrategy, TraceEvent};
use crate::distrib::KlSettings;
use crate::manifest::Dataset;
use crate::objective::{Constraints, ObjectiveConfig, Problem, TermKind, UtilityTerm};
use crate::report::{audit, SplitReport};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Valid,
    TestSpeaker,
    TestUtterance,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Train,
        Partition::Valid,
        Partition::TestSpeaker,
        Partition::TestUtterance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::TestSpeaker => "test_speaker",
            Partition::TestUtterance => "test_utterance",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Partition::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown partition `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub seed: u64,
    pub tool_version: String,
}

/// Total map from utterance id to partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub partitions: BTreeMap<String, Partition>,
    pub provenance: Option<Provenance>,
}

impl SplitAssignment {
    pub fn get(&self, utterance_id: &str) -> Option<Partition> {
        self.partitions.get(utterance_id).copied()
    }

    pub fn ids_in(&self, partition: Partition) -> impl Iterator<Item = &str> {
        self.partitions
            .iter()
            .filter(move |(_, &p)| p == partition)
            .map(|(id, _)| id.as_str())
    }

    pub fn sizes(&self) -> BTreeMap<Partition, usize> {
        let mut sizes: BTreeMap<Partition, usize> = Partition::ALL.iter().map(|&p| (p, 0)).collect();
        for p in self.partitions.values() {
            *sizes.get_mut(p).expect("all partitions") += 1;
        }
        sizes
    }

    /// One CSV per partition (`utterance_id,partition`, sorted by id).
    pub fn to_split_csv(&self, partition: Partition) -> String {
        let mut out = String::from("utterance_id,partition\n");
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for id in self.ids_in(partition) {
            writer
                .write_record([id, partition.as_str()])
                .expect("in-memory write");
        }
        out.push_str(std::str::from_utf8(&writer.into_inner().expect("in-memory flush")).expect("utf-8"));
        out
    }

    /// Parses any number of split files; ids may not repeat across them.
    pub fn from_split_csvs<'a>(files: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut partitions = BTreeMap::new();
        for text in files {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            for row in reader.records() {
                let row = row.map_err(|e| Error::Validation(format!("split file: {e}")))?;
                let (Some(id), Some(p)) = (row.get(0), row.get(1)) else {
                    return Err(Error::Validation("split file rows need two columns".into()));
                };
                let partition: Partition = p.trim().parse().map_err(Error::Validation)?;
                if partitions.insert(id.trim().to_owned(), partition).is_some() {
                    return Err(Error::Validation(format!("utterance `{id}` assigned twice")));
                }
            }
        }
        Ok(SplitAssignment {
            partitions,
            provenance: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Unseen,
    Challenge,
    #[serde(alias = "snips")]
    SnipsUnseenCombined,
    #[serde(alias = "random")]
    RandomStratified,
}

impl FromStr for PresetName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "unseen" => Ok(PresetName::Unseen),
            "challenge" => Ok(PresetName::Challenge),
            "snips" | "snips_unseen_combined" => Ok(PresetName::SnipsUnseenCombined),
            "random" | "random_stratified" => Ok(PresetName::RandomStratified),
            _ => Err(format!("unknown preset `{s}` (expected unseen, challenge, snips or random)")),
        }
    }
}

/// Percentages for train:valid:test_speaker:test_utterance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub valid: f64,
    pub test_speaker: f64,
    pub test_utterance: f64,
}

impl Ratios {
    pub fn new(train: f64, valid: f64, test_speaker: f64, test_utterance: f64) -> Self {
        Ratios {
            train,
            valid,
            test_speaker,
            test_utterance,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.train, self.valid, self.test_speaker, self.test_utterance]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_array();
        if all.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Validation(format!("ratios must be non-negative: {self}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 100.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("ratios must sum to 100, got {sum}")));
        }
        if self.train <= 0.0 {
            return Err(Error::Validation("train ratio must be positive".into()));
        }
        Ok(())
    }

    /// Utterance count for a share of `n`, rounded half up.
    pub fn count(share: f64, n: usize) -> usize {
        (share * n as f64 / 100.0).round() as usize
    }
}

impl fmt::Display for Ratios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.train, self.valid, self.test_speaker, self.test_utterance)
    }
}

impl FromStr for Ratios {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("ratio `{p}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match parts[..] {
            [a, b, c, d] => Ok(Ratios::new(a, b, c, d)),
            _ => Err(format!("expected four ratios a:b:c:d, got `{s}`")),
        }
    }
}

/// Objective for one ascent stage; the target size comes from the preset ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub terms: Vec<UtilityTerm>,
    #[serde(default)]
    pub require_full_transcript_coverage: bool,
    #[serde(default)]
    pub require_full_speaker_coverage: bool,
    /// Defaults to the largest eligible block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_tolerance: Option<usize>,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub kl: KlSettings,
}

impl StageSpec {
    fn new(terms: Vec<UtilityTerm>) -> Self {
        StageSpec {
            terms,
            require_full_transcript_coverage: false,
            require_full_speaker_coverage: false,
            size_tolerance: None,
            normalize: false,
            kl: KlSettings::default(),
        }
    }

    pub fn objective(&self, kind: BlockKind, target_size: usize, size_tolerance: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            terms: self.terms.clone(),
            constraints: Constraints {
                target_size,
                size_tolerance: self.size_tolerance.unwrap_or(size_tolerance),
                disjointness: kind,
                require_full_transcript_coverage: self.require_full_transcript_coverage,
                require_full_speaker_coverage: self.require_full_speaker_coverage,
            },
            normalize: self.normalize,
            kl: self.kl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPreset {
    pub name: PresetName,
    pub ratios: Ratios,
    /// Ascent over speaker blocks producing `test_speaker`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_stage: Option<StageSpec>,
    /// Ascent over transcript blocks producing `test_utterance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance_stage: Option<StageSpec>,
    /// Let test_utterance hold out transcripts that also occur in test_speaker.
    #[serde(default)]
    pub allow_shared_test_transcripts: bool,
}

fn unseen_speaker_stage() -> StageSpec {
    StageSpec {
        require_full_transcript_coverage: true,
        ..StageSpec::new(vec![
            UtilityTerm::minimize(TermKind::DemographicKl, 1.0),
            UtilityTerm::maximize(TermKind::NgramOverlap, 1.0),
        ])
    }
}

fn unseen_utterance_stage() -> StageSpec {
    StageSpec {
        require_full_speaker_coverage: true,
        ..StageSpec::new(vec![
            UtilityTerm::minimize(TermKind::IntentKl, 1.0),
            UtilityTerm::minimize(TermKind::LengthKl, 1.0),
        ])
    }
}

impl SplitPreset {
    pub fn named(name: PresetName) -> Self {
        match name {
            PresetName::Unseen => SplitPreset {
                name,
                ratios: Ratios::new(70.0, 10.0, 10.0, 10.0),
                speaker_stage: Some(unseen_speaker_stage()),
                utterance_stage: Some(unseen_utterance_stage()),
                allow_shared_test_transcripts: false,
            },
            PresetName::Challenge => {
                let mut speaker = unseen_speaker_stage();
                speaker.terms.push(UtilityTerm::maximize(TermKind::WerChallenge, 1.0));
                let mut utterance = unseen_utterance_stage();
                utterance.terms.push(UtilityTerm::maximize(TermKind::BleuChallenge, 1.0));
                SplitPreset {
                    name,
                    ratios: Ratios::new(70.0, 10.0, 10.0, 10.0),
                    speaker_stage: Some(speaker),
                    utterance_stage: Some(utterance),
                    allow_shared_test_transcripts: false,
                }
            }
            PresetName::SnipsUnseenCombined => SplitPreset {
                name,
                ratios: Ratios::new(75.0, 10.0, 15.0, 0.0),
                speaker_stage: Some(StageSpec::new(vec![
                    UtilityTerm::minimize(TermKind::DemographicKl, 1.0),
                    UtilityTerm::minimize(TermKind::IntentKl, 1.0),
                    UtilityTerm::minimize(TermKind::LengthKl, 1.0),
                ])),
                utterance_stage: None,
                allow_shared_test_transcripts: false,
            },
            PresetName::RandomStratified => SplitPreset {
                name,
                ratios: Ratios::new(80.0, 10.0, 5.0, 5.0),
                speaker_stage: None,
                utterance_stage: None,
                allow_shared_test_transcripts: false,
            },
        }
    }

    pub fn validate(&self, has_hypotheses: bool) -> Result<()> {
        self.ratios.validate()?;
        for (stage, share, kind) in [
            (&self.speaker_stage, self.ratios.test_speaker, BlockKind::Speaker),
            (&self.utterance_stage, self.ratios.test_utterance, BlockKind::Transcript),
        ] {
            if let Some(stage) = stage {
                if share <= 0.0 {
                    return Err(Error::Validation(format!(
                        "{kind} stage is enabled but its test ratio is {share}"
                    )));
                }
                stage.objective(kind, 1, 0).validate(has_hypotheses)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub seed: u64,
    pub ascent: AscentOptions,
}

impl PipelineOptions {
    pub fn new(seed: u64) -> Self {
        PipelineOptions {
            seed,
            ascent: AscentOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub blocks: usize,
    pub target_size: usize,
    pub size_tolerance: usize,
    pub selected_blocks: usize,
    pub selected_utterances: usize,
    pub best_score: f64,
    pub best_restart: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub assignment: SplitAssignment,
    pub report: SplitReport,
    pub stages: Vec<StageSummary>,
    pub trace: Vec<(String, TraceEvent)>,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    preset: &'a SplitPreset,
    seed: u64,
    restarts: usize,
    max_passes: usize,
    strategy: MoveStrategy,
}

/// SHA-256 over the canonical JSON of everything that determines the output.
pub fn config_digest(preset: &SplitPreset, options: &PipelineOptions) -> String {
    let input = DigestInput {
        preset,
        seed: options.seed,
        restarts: options.ascent.restarts,
        max_passes: options.ascent.max_passes,
        strategy: options.ascent.strategy,
    };
    let json = serde_json::to_vec(&input).expect("serializable config");
    hex::encode(Sha256::digest(json))
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + stage);
    rng
}

fn largest_block(dataset: &Dataset, kind: BlockKind, eligible: &BTreeSet<usize>) -> usize {
    let mut sizes: BTreeMap<String, usize> = BTreeMap::new();
    for &u in eligible {
        let r = dataset.record(u);
        let key = match kind {
            BlockKind::Speaker => r.speaker_id.clone(),
            BlockKind::Transcript => r.normalized(),
        };
        *sizes.entry(key).or_default() += 1;
    }
    sizes.into_values().max().unwrap_or(0)
}

struct StageResult {
    selected: BTreeSet<usize>,
    summary: StageSummary,
    trace: Vec<TraceEvent>,
}

fn run_stage(
    label: &str,
    dataset: &Dataset,
    pool: &BTreeSet<usize>,
    eligible: &BTreeSet<usize>,
    kind: BlockKind,
    spec: &StageSpec,
    share: f64,
    options: &PipelineOptions,
) -> Result<StageResult> {
    if eligible.is_empty() {
        return Err(Error::Infeasible {
            stage: label.to_owned(),
            constraint: format!("no eligible {kind} blocks remain"),
        });
    }
    let target = Ratios::count(share, dataset.len());
    let tolerance = largest_block(dataset, kind, eligible);
    let config = spec.objective(kind, target, tolerance);
    let problem = Problem::new(label, dataset, pool, eligible, config)?;
    let outcome = run_ascent(&problem, options.seed, &options.ascent)?;
    let selected: BTreeSet<usize> = problem
        .blocks()
        .iter()
        .zip(&outcome.best_selection)
        .filter(|(_, &t)| t)
        .flat_map(|(b, _)| b.members.iter().copied())
        .collect();
    Ok(StageResult {
        summary: StageSummary {
            stage: label.to_owned(),
            blocks: problem.blocks().len(),
            target_size: target,
            size_tolerance: problem.config().constraints.size_tolerance,
            selected_blocks: outcome.best.test.len(),
            selected_utterances: selected.len(),
            best_score: outcome.best_score,
            best_restart: outcome.best_restart,
        },
        selected,
        trace: outcome.trace,
    })
}

/// Builds a [`SplitAssignment`] for `dataset` and audits it.
pub fn run_pipeline(
    dataset: &Dataset,
    preset: &SplitPreset,
    options: &PipelineOptions,
) -> Result<PipelineOutcome> {
    preset.validate(dataset.has_hypotheses())?;
    let all: BTreeSet<usize> = (0..dataset.len()).collect();
    let mut stages = Vec::new();
    let mut trace = Vec::new();
    let mut partition: Vec<Option<crate::pipeline::Partition>> = vec![None; dataset.len()];

    let mut residual = all.clone();
    let mut test_speaker = BTreeSet::new();
    if let Some(spec) = &preset.speaker_stage {
        let label = "stage 1 (speaker test set)";
        let result = run_stage(
            label,
            dataset,
            &residual,
            &residual,
            BlockKind::Speaker,
            spec,
            preset.ratios.test_speaker,
            options,
        )?;
        test_speaker = result.selected;
        stages.push(result.summary);
        trace.extend(result.trace.into_iter().map(|e| (label.to_owned(), e)));
        for &u in &test_speaker {
            partition[u] = Some(Partition::TestSpeaker);
        }
        residual = residual.difference(&test_speaker).copied().collect();
    }

    let speaker_transcripts: BTreeSet<String> =
        test_speaker.iter().map(|&u| dataset.record(u).normalized()).collect();
    let mut test_utterance = BTreeSet::new();
    if let Some(spec) = &preset.utterance_stage {
        let label = "stage 2 (utterance test set)";
        let eligible: BTreeSet<usize> = residual
            .iter()
            .copied()
            .filter(|&u| {
                preset.allow_shared_test_transcripts
                    || !speaker_transcripts.contains(&dataset.record(u).normalized())
            })
            .collect();
        let result = run_stage(
            label,
            dataset,
            &residual,
            &eligible,
            BlockKind::Transcript,
            spec,
            preset.ratios.test_utterance,
            options,
        )?;
        test_utterance = result.selected;
        stages.push(result.summary);
        trace.extend(result.trace.into_iter().map(|e| (label.to_owned(), e)));
        for &u in &test_utterance {
            partition[u] = Some(Partition::TestUtterance);
        }
        residual = residual.difference(&test_utterance).copied().collect();
    }

    let label_of = |u: usize| dataset.record(u).intent.clone();
    let mut rng = stage_rng(options.seed, 3);
    let pool: Vec<usize> = residual.iter().copied().collect();
    if preset.speaker_stage.is_none() && preset.utterance_stage.is_none() {
        let shares = preset.ratios.as_array();
        let groups = stratified_apportion(&pool, &shares, label_of, &BTreeSet::new(), &mut rng);
        for (group, p) in groups.iter().zip(Partition::ALL) {
            for &u in group {
                partition[u] = Some(p);
            }
        }
    } else {
        let pinned = train_anchors(dataset, &residual, &test_speaker, &test_utterance);
        let shares = [preset.ratios.train, preset.ratios.valid];
        let groups = stratified_apportion(&pool, &shares, label_of, &pinned, &mut rng);
        for (group, p) in groups.iter().zip([Partition::Train, Partition::Valid]) {
            for &u in group {
                partition[u] = Some(p);
            }
        }
    }

    let partitions = partition
        .into_iter()
        .enumerate()
        .map(|(u, p)| (dataset.record(u).utterance_id.clone(), p.expect("every utterance assigned")))
        .collect();
    let assignment = SplitAssignment {
        partitions,
        provenance: Some(Provenance {
            config_digest: config_digest(preset, options),
            seed: options.seed,
            tool_version: TOOL_VERSION.to_owned(),
        }),
    };

    let expectations = Expectations::for_preset(preset);
    let problems = check_assignment(dataset, &assignment, &expectations);
    if !problems.is_empty() {
        return Err(Error::Infeasible {
            stage: "stage 3 (train/valid)".to_owned(),
            constraint: problems.join("; "),
        });
    }
    let report = audit(dataset, &assignment)?;
    Ok(PipelineOutcome {
        assignment,
        report,
        stages,
        trace,
    })
}

/// Residual utterances that must land in train: one recording of every
/// test_speaker transcript and one utterance of every test_utterance speaker.
fn train_anchors(
    dataset: &Dataset,
    residual: &BTreeSet<usize>,
    test_speaker: &BTreeSet<usize>,
    test_utterance: &BTreeSet<usize>,
) -> BTreeSet<usize> {
    let mut pinned = BTreeSet::new();
    let transcripts: BTreeSet<String> =
        test_speaker.iter().map(|&u| dataset.record(u).normalized()).collect();
    for t in &transcripts {
        if let Some(&u) = dataset.transcript_index()[t].iter().find(|u| residual.contains(u)) {
            pinned.insert(u);
        }
    }
    let speakers: BTreeSet<&str> = test_utterance
        .iter()
        .map(|&u| dataset.record(u).speaker_id.as_str())
        .collect();
    for s in speakers {
        let owned = &dataset.speaker_index()[s];
        if owned.iter().any(|u| pinned.contains(u)) {
            continue;
        }
        if let Some(&u) = owned.iter().find(|u| residual.contains(u)) {
            pinned.insert(u);
        }
    }
    pinned
}

/// Hamilton apportionment of `total` seats by `shares`; ties go to the lower index.
fn hamilton(total: usize, shares: &[f64]) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| total as f64 * s / sum).collect();
    let mut seats: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = seats.iter().sum();
    for &k in order.iter().take(total - assigned) {
        seats[k] += 1;
    }
    seats
}

/// Stratified apportionment of `pool` into `shares.len()` groups.
///
/// Group totals follow a Hamilton apportionment of the whole pool. Within
/// each label class, members are shuffled and seats are allotted by
/// largest remainder against those totals. Singleton classes and pinned
/// members go to group 0.
pub fn stratified_apportion<K: Ord + Clone>(
    pool: &[usize],
    shares: &[f64],
    label_of: impl Fn(usize) -> K,
    pinned: &BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let groups = shares.len();
    let mut classes: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for &u in pool {
        classes.entry(label_of(u)).or_default().push(u);
    }
    let sum: f64 = shares.iter().sum();
    let mut deficit = hamilton(pool.len(), shares);

    // seats[c][k]
    let class_list: Vec<Vec<usize>> = classes.into_values().collect();
    let mut seats = vec![vec![0usize; groups]; class_list.len()];
    let mut open: Vec<usize> = vec![0; class_list.len()];
    let mut fractions = Vec::new();
    for (c, members) in class_list.iter().enumerate() {
        let n = members.len();
        if n == 1 {
            seats[c][0] = 1;
            deficit[0] = deficit[0].saturating_sub(1);
            continue;
        }
        let mut used = 0;
        for k in 0..groups {
            let exact = n as f64 * shares[k] / sum;
            let floor = exact.floor() as usize;
            seats[c][k] = floor;
            used += floor;
            deficit[k] = deficit[k].saturating_sub(floor);
            fractions.push((exact - floor as f64, c, k));
        }
        open[c] = n - used;
    }
    fractions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, c, k) in &fractions {
        if open[c] > 0 && deficit[k] > 0 {
            seats[c][k] += 1;
            open[c] -= 1;
            deficit[k] -= 1;
        }
    }
    // leftovers when every group a class could still use is already full
    for c in 0..class_list.len() {
        while open[c] > 0 {
            let k = (0..groups).max_by_key(|&k| (deficit[k], std::cmp::Reverse(k))).unwrap_or(0);
            seats[c][k] += 1;
            open[c] -= 1;
            deficit[k] = deficit[k].saturating_sub(1);
        }
    }

    let mut out = vec![Vec::new(); groups];
    for (c, members) in class_list.iter().enumerate() {
        let mut order = members.clone();
        order.shuffle(rng);
        // pinned members first so they fill group 0
        order.sort_by_key(|u| !pinned.contains(u));
        let pinned_here = order.iter().filter(|u| pinned.contains(u)).count();
        let mut counts = seats[c].clone();
        while counts[0] < pinned_here {
            let k = (1..groups).max_by_key(|&k| counts[k]).expect("at least two groups");
            counts[k] -= 1;
            counts[0] += 1;
        }
        let mut it = order.into_iter();
        for (k, &n) in counts.iter().enumerate() {
            out[k].extend(it.by_ref().take(n));
        }
    }
    for group in &mut out {
        group.sort_unstable();
    }
    out
}

/// Seeded intent-stratified train/valid split at `ratio` (train, valid).
pub fn stratified_train_valid<K: Ord + Clone>(
    pool: &[usize],
    ratio: (f64, f64),
    label_of: impl Fn(usize) -> K,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stage_rng(seed, 3);
    let mut groups = stratified_apportion(pool, &[ratio.0, ratio.1], label_of, &BTreeSet::new(), &mut rng);
    let valid = groups.pop().expect("two groups");
    let train = groups.pop().expect("two groups");
    (train, valid)
}

/// Invariants a finished assignment must satisfy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Expectations {
    /// No test_speaker speaker elsewhere.
    pub speakers_held_out: bool,
    /// No test_utterance transcript in train or valid.
    pub transcripts_held_out: bool,
    /// No test_utterance transcript in test_speaker.
    pub transcripts_exclusive: bool,
    /// Every test_speaker transcript occurs in train.
    pub speaker_set_transcripts_in_train: bool,
    /// Every test_utterance speaker occurs in train.
    pub utterance_set_speakers_in_train: bool,
}

impl Expectations {
    pub fn for_preset(preset: &SplitPreset) -> Self {
        let speaker = preset.speaker_stage.as_ref();
        let utterance = preset.utterance_stage.as_ref();
        Expectations {
            speakers_held_out: speaker.is_some(),
            transcripts_held_out: utterance.is_some(),
            transcripts_exclusive: utterance.is_some() && !preset.allow_shared_test_transcripts,
            speaker_set_transcripts_in_train: speaker
                .is_some_and(|s| s.require_full_transcript_coverage)
                && !preset.allow_shared_test_transcripts,
            utterance_set_speakers_in_train: utterance.is_some_and(|s| s.require_full_speaker_coverage),
        }
    }
}

/// Independent post-hoc check that reads only the dataset and the assignment.
pub fn check_assignment(
    dataset: &Dataset,
    assignment: &SplitAssignment,
    expect: &Expectations,
) -> Vec<String> {
    let mut problems = Vec::new();
    for r in dataset.records() {
        if assignment.get(&r.utterance_id).is_none() {
            problems.push(format!("utterance `{}` unassigned", r.utterance_id));
        }
    }
    if assignment.partitions.len() != dataset.len() {
        problems.push("assignment size differs from dataset size".to_owned());
    }
    let mut speakers: BTreeMap<Partition, BTreeSet<&str>> = BTreeMap::new();
    let mut transcripts: BTreeMap<Partition, BTreeSet<String>> = BTreeMap::new();
    for r in dataset.records() {
        if let Some(p) = assignment.get(&r.utterance_id) {
            speakers.entry(p).or_default().insert(&r.speaker_id);
            transcripts.entry(p).or_default().insert(r.normalized());
        }
    }
    let empty_s = BTreeSet::new();
    let empty_t = BTreeSet::new();
    let spk = |p| speakers.get(&p).unwrap_or(&empty_s);
    let txt = |p| transcripts.get(&p).unwrap_or(&empty_t);

    if expect.speakers_held_out {
        for p in [Partition::Train, Partition::Valid, Partition::TestUtterance] {
            for s in spk(Partition::TestSpeaker).intersection(spk(p)) {
                problems.push(format!("test_speaker speaker `{s}` also in {p}"));
            }
        }
    }
    if expect.transcripts_held_out {
        for p in [Partition::Train, Partition::Valid] {
            for t in txt(Partition::TestUtterance).intersection(txt(p)) {
                problems.push(format!("test_utterance transcript `{t}` also in {p}"));
            }
        }
    }
    if expect.transcripts_exclusive {
        for t in txt(Partition::TestUtterance).intersection(txt(Partition::TestSpeaker)) {
            problems.push(format!("test_utterance transcript `{t}` also in test_speaker"));
        }
    }
    if expect.speaker_set_transcripts_in_train {
        for t in txt(Partition::TestSpeaker).difference(txt(Partition::Train)) {
            problems.push(format!("test_speaker transcript `{t}` missing from train"));
        }
    }
    if expect.utterance_set_speakers_in_train {
        for s in spk(Partition::TestUtterance).difference(spk(Partition::Train)) {
            problems.push(format!("test_utterance speaker `{s}` missing from train"));
        }
    }
    problems
}
