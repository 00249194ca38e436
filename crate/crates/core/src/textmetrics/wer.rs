use std::cmp::Reverse;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use super::MetricError;

/// Edit counts of one minimum-cost alignment, or a sum of them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl AlignmentCounts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

impl Add for AlignmentCounts {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for AlignmentCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.substitutions += rhs.substitutions;
        self.insertions += rhs.insertions;
        self.deletions += rhs.deletions;
        self.reference_length += rhs.reference_length;
    }
}

impl Sum for AlignmentCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

impl<'a> Sum<&'a AlignmentCounts> for AlignmentCounts {
    fn sum<I: Iterator<Item = &'a Self>>(iter: I) -> Self {
        iter.copied().sum()
    }
}

#[derive(Clone, Copy)]
struct Cell {
    cost: usize,
    subs: usize,
    ins: usize,
    del: usize,
}

impl Cell {
    fn key(&self) -> (usize, Reverse<usize>) {
        (self.cost, Reverse(self.subs))
    }
}

/// Aligns `hypothesis` against `reference` with unit edit costs.
///
/// Among minimum-cost alignments the one with the most substitutions is
/// chosen. Since `I - D = |hyp| - |ref|` on every alignment, this fixes the
/// whole decomposition, and swapping the arguments swaps I and D.
pub fn wer_align<T: PartialEq>(
    reference: &[T],
    hypothesis: &[T],
) -> Result<AlignmentCounts, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let width = hypothesis.len() + 1;
    let mut prev: Vec<Cell> = (0..width)
        .map(|j| Cell {
            cost: j,
            subs: 0,
            ins: j,
            del: 0,
        })
        .collect();
    let mut curr = prev.clone();

    for (i, r) in reference.iter().enumerate() {
        curr[0] = Cell {
            cost: i + 1,
            subs: 0,
            ins: 0,
            del: i + 1,
        };
        for (j, h) in hypothesis.iter().enumerate() {
            let mismatch = usize::from(r != h);
            let diag = prev[j];
            let diag = Cell {
                cost: diag.cost + mismatch,
                subs: diag.subs + mismatch,
                ..diag
            };
            let left = curr[j];
            let ins = Cell {
                cost: left.cost + 1,
                ins: left.ins + 1,
                ..left
            };
            let up = prev[j + 1];
            let del = Cell {
                cost: up.cost + 1,
                del: up.del + 1,
                ..up
            };
            curr[j + 1] = [diag, ins, del]
                .into_iter()
                .min_by_key(Cell::key)
                .expect("three candidates");
        }
        std::mem::swap(&mut prev, &mut curr);
    }

    let end = prev[hypothesis.len()];
    Ok(AlignmentCounts {
        substitutions: end.subs,
        insertions: end.ins,
        deletions: end.del,
        reference_length: reference.len(),
    })
}

/// Substitution, insertion, deletion and overall error rates as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerRates {
    pub substitution: f64,
    pub insertion: f64,
    pub deletion: f64,
    pub wer: f64,
}

pub fn wer_rates(counts: &AlignmentCounts) -> Result<WerRates, MetricError> {
    if counts.reference_length == 0 {
        return Err(MetricError::ZeroReferenceLength);
    }
    let len = counts.reference_length as f64;
    Ok(WerRates {
        substitution: counts.substitutions as f64 / len,
        insertion: counts.insertions as f64 / len,
        deletion: counts.deletions as f64 / len,
        wer: counts.edits() as f64 / len,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Sum counts, then divide.
    #[default]
    Micro,
    /// Mean of per-utterance rates.
    Macro,
}

pub fn aggregate_rates(
    items: &[AlignmentCounts],
    averaging: Averaging,
) -> Result<WerRates, MetricError> {
    match averaging {
        Averaging::Micro => wer_rates(&items.iter().sum()),
        Averaging::Macro => {
            if items.is_empty() {
                return Err(MetricError::ZeroReferenceLength);
            }
            let mut acc = [0.0; 4];
            for item in items {
                let r = wer_rates(item)?;
                acc[0] += r.substitution;
                acc[1] += r.insertion;
                acc[2] += r.deletion;
                acc[3] += r.wer;
            }
            let n = items.len() as f64;
            Ok(WerRates {
                substitution: acc[0] / n,
                insertion: acc[1] / n,
                deletion: acc[2] / n,
                wer: acc[3] / n,
            })
        }
    }
}

/// Weights of the insertion/deletion penalties in [`u_wer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UWerParams {
    /// Penalty on `|I - D|`.
    pub alpha: f64,
    /// Penalty on `I`.
    pub beta: f64,
    /// Penalty on `D`.
    pub gamma: f64,
}

impl Default for UWerParams {
    fn default() -> Self {
        UWerParams {
            alpha: 0.05,
            beta: 0.05,
            gamma: 0.4,
        }
    }
}

impl UWerParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MetricError::InvalidParameter(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// `S - alpha*|I - D| - beta*I - gamma*D`, rewarding substitutions while
/// penalizing insertion/deletion heavy (likely misaligned) data.
pub fn u_wer(rates: &WerRates, params: &UWerParams) -> f64 {
    rates.substitution
        - params.alpha * (rates.insertion - rates.deletion).abs()
        - params.beta * rates.insertion
        - params.gamma * rates.deletion
}
