//! Audit statistics for any split assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distrib::{demographic_kl, KlSettings};
use crate::manifest::Dataset;
use crate::pipeline::{Partition, Provenance, SplitAssignment};
use crate::textmetrics::{
    aggregate_rates, corpus_ngram_overlap, wer_align, AlignmentCounts, Averaging, WerRates,
    MAX_ORDER,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSettings {
    #[serde(default)]
    pub kl: KlSettings,
    #[serde(default)]
    pub averaging: Averaging,
}

/// Statistics for one non-train partition, measured against train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub partition: Partition,
    pub size: usize,
    pub speakers: usize,
    pub transcripts: usize,
    /// Percent of distinct speakers also present in train.
    pub speaker_coverage: Option<f64>,
    /// Percent of distinct normalized transcripts also present in train.
    pub utterance_coverage: Option<f64>,
    /// Symmetrised demographic KL against the train speakers.
    pub speaker_kl: Option<f64>,
    pub wer: Option<WerRates>,
    pub missing_hypotheses: usize,
    /// Percent modified precision against train for orders 1 to 4.
    pub ngram_overlap: [Option<f64>; MAX_ORDER],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub dataset_size: usize,
    pub partition_sizes: BTreeMap<Partition, usize>,
    pub sets: Vec<SetStats>,
    pub train_wer: Option<WerRates>,
    pub overall_wer: Option<WerRates>,
    /// L1 distance between the train and valid intent distributions.
    pub intent_l1_train_valid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl SplitReport {
    pub fn set(&self, partition: Partition) -> Option<&SetStats> {
        self.sets.iter().find(|s| s.partition == partition)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("report: {e}")))
    }

    /// Aligned plain-text table, one row per non-train partition.
    pub fn render_table(&self) -> String {
        let header = [
            "Test Set", "Speaker Cov", "Utterance Cov", "Speaker KL", "Size", "%S", "%I", "%D",
            "%WER", "1-gram", "2-gram", "3-gram", "4-gram",
        ];
        let mut rows = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        for s in &self.sets {
            let rate = |f: fn(&WerRates) -> f64| s.wer.as_ref().map(f).map(|v| v * 100.0);
            let mut row = vec![
                s.partition.to_string(),
                pct(s.speaker_coverage),
                pct(s.utterance_coverage),
                num(s.speaker_kl),
                s.size.to_string(),
                num1(rate(|r| r.substitution)),
                num1(rate(|r| r.insertion)),
                num1(rate(|r| r.deletion)),
                num1(rate(|r| r.wer)),
            ];
            row.extend(s.ngram_overlap.iter().map(|o| num1(*o)));
            rows.push(row);
        }
        let mut out = align(&rows);
        let sizes: Vec<String> = self
            .partition_sizes
            .iter()
            .map(|(p, n)| format!("{p}={n}"))
            .collect();
        let _ = writeln!(out, "\npartition sizes: {}", sizes.join(" "));
        if let Some(l1) = self.intent_l1_train_valid {
            let _ = writeln!(out, "intent L1 train/valid: {l1:.4}");
        }
        if let Some(p) = &self.provenance {
            let _ = writeln!(out, "seed {} | config {} | version {}", p.seed, p.config_digest, p.tool_version);
        }
        out
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.1}%"))
}

fn num(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn num1(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.1}"))
}

fn align(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                if c == 0 {
                    format!("{cell:<w$}", w = widths[c])
                } else {
                    format!("{cell:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Side-by-side rendering, one column per named report in input order.
pub fn render_comparison(reports: &[(String, SplitReport)]) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec![String::new()];
    header.extend(reports.iter().map(|(name, _)| name.clone()));
    rows.push(header);
    let mut push = |label: String, f: &dyn Fn(&SplitReport) -> String| {
        let mut row = vec![label];
        row.extend(reports.iter().map(|(_, r)| f(r)));
        rows.push(row);
    };
    for p in [Partition::TestSpeaker, Partition::TestUtterance, Partition::Valid] {
        let stat = move |r: &SplitReport, f: &dyn Fn(&SetStats) -> String| {
            r.set(p).map_or("-".into(), f)
        };
        push(format!("{p} size"), &|r| stat(r, &|s| s.size.to_string()));
        push(format!("{p} speaker cov"), &|r| stat(r, &|s| pct(s.speaker_coverage)));
        push(format!("{p} utterance cov"), &|r| stat(r, &|s| pct(s.utterance_coverage)));
        push(format!("{p} speaker KL"), &|r| stat(r, &|s| num(s.speaker_kl)));
        push(format!("{p} %S"), &|r| {
            stat(r, &|s| num1(s.wer.map(|w| w.substitution * 100.0)))
        });
        push(format!("{p} %WER"), &|r| stat(r, &|s| num1(s.wer.map(|w| w.wer * 100.0))));
        for order in 1..=MAX_ORDER {
            push(format!("{p} {order}-gram"), &|r| stat(r, &|s| num1(s.ngram_overlap[order - 1])));
        }
    }
    push("train size".into(), &|r| r.partition_sizes[&Partition::Train].to_string());
    push("intent L1 train/valid".into(), &|r| num(r.intent_l1_train_valid));
    align(&rows)
}

/// Audits `assignment` with default settings.
pub fn audit(dataset: &Dataset, assignment: &SplitAssignment) -> Result<SplitReport> {
    audit_with(dataset, assignment, &AuditSettings::default())
}

pub fn audit_with(
    dataset: &Dataset,
    assignment: &SplitAssignment,
    settings: &AuditSettings,
) -> Result<SplitReport> {
    let unknown: Vec<String> = assignment
        .partitions
        .keys()
        .filter(|id| dataset.position(id).is_none())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownUtterances(unknown));
    }
    let unassigned: Vec<String> = dataset
        .records()
        .iter()
        .filter(|r| assignment.get(&r.utterance_id).is_none())
        .map(|r| r.utterance_id.clone())
        .collect();
    if !unassigned.is_empty() {
        return Err(Error::Unassigned(unassigned));
    }

    let mut members: BTreeMap<Partition, Vec<usize>> =
        Partition::ALL.iter().map(|&p| (p, Vec::new())).collect();
    for (i, r) in dataset.records().iter().enumerate() {
        let p = assignment.get(&r.utterance_id).expect("checked above");
        members.get_mut(&p).expect("all partitions").push(i);
    }
    let train = &members[&Partition::Train];
    let train_speakers: BTreeSet<&str> =
        train.iter().map(|&u| dataset.record(u).speaker_id.as_str()).collect();
    let train_transcripts: BTreeMap<String, &[String]> = train
        .iter()
        .map(|&u| (dataset.record(u).normalized(), dataset.record(u).tokens.as_slice()))
        .collect();
    let train_refs: Vec<&[String]> = train_transcripts.values().copied().collect();

    let wer_of = |utterances: &[usize]| -> (Option<WerRates>, usize) {
        let mut counts: Vec<AlignmentCounts> = Vec::new();
        let mut missing = 0;
        for &u in utterances {
            let r = dataset.record(u);
            match r.hypothesis_tokens.as_ref().map(|h| wer_align(&r.tokens, h)) {
                Some(Ok(c)) => counts.push(c),
                _ => missing += 1,
            }
        }
        (aggregate_rates(&counts, settings.averaging).ok(), missing)
    };

    let mut sets = Vec::new();
    for p in [Partition::Valid, Partition::TestSpeaker, Partition::TestUtterance] {
        let set = &members[&p];
        let speakers: BTreeSet<&str> = set.iter().map(|&u| dataset.record(u).speaker_id.as_str()).collect();
        let transcripts: BTreeMap<String, &[String]> = set
            .iter()
            .map(|&u| (dataset.record(u).normalized(), dataset.record(u).tokens.as_slice()))
            .collect();
        let percent = |hit: usize, total: usize| (total > 0).then(|| 100.0 * hit as f64 / total as f64);
        let speaker_coverage = percent(
            speakers.iter().filter(|s| train_speakers.contains(*s)).count(),
            speakers.len(),
        );
        let utterance_coverage = percent(
            transcripts.keys().filter(|t| train_transcripts.contains_key(*t)).count(),
            transcripts.len(),
        );
        let speaker_kl = if speakers.is_empty() || train_speakers.is_empty() {
            None
        } else {
            Some(demographic_kl(
                dataset,
                speakers.iter().copied(),
                train_speakers.iter().copied(),
                &settings.kl,
            )?)
        };
        let (wer, missing_hypotheses) = wer_of(set);
        let test_refs: Vec<&[String]> = transcripts.values().copied().collect();
        let mut ngram_overlap = [None; MAX_ORDER];
        if !train_refs.is_empty() {
            for (order, slot) in (1..=MAX_ORDER).zip(ngram_overlap.iter_mut()) {
                *slot = corpus_ngram_overlap(&test_refs, &train_refs, order).ok();
            }
        }
        sets.push(SetStats {
            partition: p,
            size: set.len(),
            speakers: speakers.len(),
            transcripts: transcripts.len(),
            speaker_coverage,
            utterance_coverage,
            speaker_kl,
            wer,
            missing_hypotheses,
            ngram_overlap,
        });
    }

    let intent_l1_train_valid = {
        let valid = &members[&Partition::Valid];
        if train.is_empty() || valid.is_empty() {
            None
        } else {
            let freq = |set: &[usize]| {
                let mut counts: BTreeMap<_, f64> = BTreeMap::new();
                for &u in set {
                    *counts.entry(&dataset.record(u).intent).or_default() += 1.0;
                }
                let n = set.len() as f64;
                counts.into_iter().map(|(k, c)| (k, c / n)).collect::<BTreeMap<_, _>>()
            };
            let (a, b) = (freq(train), freq(valid));
            let keys: BTreeSet<_> = a.keys().chain(b.keys()).collect();
            Some(
                keys.into_iter()
                    .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
                    .sum(),
            )
        }
    };

    let all: Vec<usize> = (0..dataset.len()).collect();
    Ok(SplitReport {
        dataset_size: dataset.len(),
        partition_sizes: members.iter().map(|(&p, m)| (p, m.len())).collect(),
        sets,
        train_wer: wer_of(train).0,
        overall_wer: wer_of(&all).0,
        intent_l1_train_valid,
        provenance: assignment.provenance.clone(),
    })
}
