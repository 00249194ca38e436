use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::MetricError;

pub const MAX_ORDER: usize = 4;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Per-order n-gram weights, non-negative and summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BleuWeights([f64; MAX_ORDER]);

impl BleuWeights {
    pub fn new(weights: [f64; MAX_ORDER]) -> Result<Self, MetricError> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MetricError::InvalidWeights(format!("{weights:?} has a negative entry")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(MetricError::InvalidWeights(format!("{weights:?} sums to {sum}")));
        }
        Ok(BleuWeights(weights))
    }

    pub fn uniform() -> Self {
        BleuWeights([0.25; MAX_ORDER])
    }

    /// Unigram and bigram only, equally weighted.
    pub fn unigram_bigram() -> Self {
        BleuWeights([0.5, 0.5, 0.0, 0.0])
    }

    pub fn as_array(&self) -> [f64; MAX_ORDER] {
        self.0
    }
}

impl TryFrom<[f64; MAX_ORDER]> for BleuWeights {
    type Error = MetricError;

    fn try_from(value: [f64; MAX_ORDER]) -> Result<Self, Self::Error> {
        BleuWeights::new(value)
    }
}

impl From<BleuWeights> for [f64; MAX_ORDER] {
    fn from(w: BleuWeights) -> Self {
        w.0
    }
}

pub fn ngram_counts<T: Eq + Hash>(tokens: &[T], order: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if order == 0 {
        return counts;
    }
    for gram in tokens.windows(order) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipping statistics of a reference set: the maximum count of every
/// n-gram over any single reference, plus the sorted reference lengths.
#[derive(Debug, Clone)]
pub struct ReferencePool<'a, T> {
    max_counts: Vec<HashMap<&'a [T], usize>>,
    lengths: Vec<usize>,
}

impl<'a, T: Eq + Hash> ReferencePool<'a, T> {
    pub fn new<S: AsRef<[T]>>(references: &'a [S]) -> Self {
        let mut max_counts = vec![HashMap::new(); MAX_ORDER];
        let mut lengths = Vec::with_capacity(references.len());
        for reference in references {
            let reference = reference.as_ref();
            lengths.push(reference.len());
            for (order, slot) in (1..=MAX_ORDER).zip(max_counts.iter_mut()) {
                for (gram, count) in ngram_counts(reference, order) {
                    let entry = slot.entry(gram).or_insert(0);
                    *entry = (*entry).max(count);
                }
            }
        }
        lengths.sort_unstable();
        ReferencePool {
            max_counts,
            lengths,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// `(clipped matches, candidate n-gram total)` for one order.
    pub fn modified_precision(&self, candidate: &[T], order: usize) -> (usize, usize) {
        let max = &self.max_counts[order - 1];
        let counts = ngram_counts(candidate, order);
        let total = counts.values().sum();
        let matched = counts
            .iter()
            .map(|(gram, &c)| c.min(max.get(gram).copied().unwrap_or(0)))
            .sum();
        (matched, total)
    }

    /// Length of the reference closest to `candidate_len`; ties go to the shorter one.
    pub fn closest_length(&self, candidate_len: usize) -> usize {
        self.lengths
            .iter()
            .copied()
            .min_by_key(|&r| (r.abs_diff(candidate_len), r))
            .unwrap_or(0)
    }

    pub fn bleu(&self, candidate: &[T], weights: &BleuWeights) -> Result<f64, MetricError> {
        if candidate.is_empty() {
            return Err(MetricError::EmptyCandidate);
        }
        if self.is_empty() {
            return Err(MetricError::NoReferences);
        }
        let mut log_sum = 0.0;
        for (order, &w) in (1..=MAX_ORDER).zip(weights.0.iter()) {
            if w == 0.0 {
                continue;
            }
            let (matched, total) = self.modified_precision(candidate, order);
            // no n-grams of this order, or none matched: plain BLEU collapses to zero
            if matched == 0 || total == 0 {
                return Ok(0.0);
            }
            log_sum += w * (matched as f64 / total as f64).ln();
        }
        let c = candidate.len() as f64;
        let r = self.closest_length(candidate.len()) as f64;
        let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        Ok(brevity * log_sum.exp())
    }
}

/// Sentence BLEU with clipped modified precisions and the closest-length
/// brevity penalty. Zero precision at any weighted order gives 0.
pub fn sentence_bleu<T: Eq + Hash, S: AsRef<[T]>>(
    candidate: &[T],
    references: &[S],
    weights: &BleuWeights,
) -> Result<f64, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::EmptyCandidate);
    }
    ReferencePool::new(references).bleu(candidate, weights)
}

/// Negated sentence BLEU; larger when the candidate shares fewer n-grams.
pub fn u_bleu<T: Eq + Hash, S: AsRef<[T]>>(
    candidate: &[T],
    references: &[S],
    weights: &BleuWeights,
) -> Result<f64, MetricError> {
    sentence_bleu(candidate, references, weights).map(|b| -b)
}

/// Mean order-`order` modified precision (in percent) of each test
/// transcript against the pooled training transcripts. Test transcripts
/// shorter than `order` are skipped.
pub fn corpus_ngram_overlap<T: Eq + Hash, S: AsRef<[T]>>(
    test: &[S],
    train: &[S],
    order: usize,
) -> Result<f64, MetricError> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(MetricError::InvalidOrder(order));
    }
    if test.is_empty() {
        return Err(MetricError::EmptyTestSet);
    }
    let pool = ReferencePool::new(train);
    let mut sum = 0.0;
    let mut eligible = 0usize;
    for transcript in test {
        let transcript = transcript.as_ref();
        if transcript.len() < order {
            continue;
        }
        let (matched, total) = pool.modified_precision(transcript, order);
        sum += matched as f64 / total as f64;
        eligible += 1;
    }
    if eligible == 0 {
        return Err(MetricError::OrderInapplicable { order });
    }
    Ok(100.0 * sum / eligible as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_sentence_scores_one() {
        let c = toks("turn on the kitchen lights");
        let b = sentence_bleu(&c, &[c.clone()], &BleuWeights::uniform()).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
        assert_eq!(u_bleu(&c, &[c.clone()], &BleuWeights::uniform()).unwrap(), -b);
    }

    #[test]
    fn half_and_third_precisions() {
        let c = toks("a b c d");
        let r = toks("a b x y");
        let b = sentence_bleu(&c, &[r.clone()], &BleuWeights::unigram_bigram()).unwrap();
        assert!((b - (1.0f64 / 6.0).sqrt()).abs() < 1e-12);
        let u = u_bleu(&c, &[r], &BleuWeights::unigram_bigram()).unwrap();
        assert!((u + 0.408_248_290_463_863).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let b = sentence_bleu(&toks("a b c"), &[toks("x y z")], &BleuWeights::uniform()).unwrap();
        assert_eq!(b, 0.0);
        assert_eq!(u_bleu(&toks("a b c"), &[toks("x y z")], &BleuWeights::uniform()).unwrap(), -0.0);
    }

    #[test]
    fn clipping_limits_repeated_tokens() {
        // "the the the" vs "the cat": unigram precision 1/3
        let w = BleuWeights::new([1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = sentence_bleu(&toks("the the the"), &[toks("the cat")], &w).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_uses_closest_shorter_reference_on_ties() {
        let w = BleuWeights::new([1.0, 0.0, 0.0, 0.0]).unwrap();
        // candidate length 2; references of length 1 and 3 are equally close
        let refs = [toks("a"), toks("a b c")];
        let b = sentence_bleu(&toks("a b"), &refs, &w).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
        let refs = [toks("a b c d")];
        let b = sentence_bleu(&toks("a b"), &refs, &w).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let empty: Vec<&str> = vec![];
        assert_eq!(
            sentence_bleu(&empty, &[toks("a")], &BleuWeights::uniform()),
            Err(MetricError::EmptyCandidate)
        );
        let none: Vec<Vec<&str>> = vec![];
        assert_eq!(
            sentence_bleu(&toks("a"), &none, &BleuWeights::uniform()),
            Err(MetricError::NoReferences)
        );
        assert!(BleuWeights::new([0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(BleuWeights::new([1.5, -0.5, 0.0, 0.0]).is_err());
        assert!(BleuWeights::new([0.5, 0.5 + 1e-12, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn overlap_containment_and_disjoint() {
        let train = [toks("turn on the lights"), toks("lights off"), toks("heat up the kitchen")];
        let test = [toks("lights off"), toks("turn on the lights")];
        for order in 1..=2 {
            assert_eq!(corpus_ngram_overlap(&test, &train, order).unwrap(), 100.0);
        }
        // order 3 drops "lights off"
        assert_eq!(corpus_ngram_overlap(&test, &train, 3).unwrap(), 100.0);
        assert_eq!(
            corpus_ngram_overlap(&[toks("a b")], &[toks("c d")], 1).unwrap(),
            0.0
        );
        assert_eq!(
            corpus_ngram_overlap(&[toks("a b")], &[toks("c d")], 3),
            Err(MetricError::OrderInapplicable { order: 3 })
        );
        assert_eq!(
            corpus_ngram_overlap(&[toks("a b")], &[toks("c d")], 5),
            Err(MetricError::InvalidOrder(5))
        );
    }

    proptest! {
        #[test]
        fn bleu_in_unit_interval(
            c in prop::collection::vec(0u8..6, 1..8),
            refs in prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..4),
        ) {
            let b = sentence_bleu(&c, &refs, &BleuWeights::uniform()).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            let u = u_bleu(&c, &refs, &BleuWeights::uniform()).unwrap();
            prop_assert_eq!(u, -b);
        }

        #[test]
        fn overlap_drops_when_train_shrinks(
            test in prop::collection::vec(prop::collection::vec(0u8..5, 2..6), 1..5),
            train in prop::collection::vec(prop::collection::vec(0u8..5, 1..6), 2..8),
            drop in 0usize..8,
            order in 1usize..=2,
        ) {
            let full = corpus_ngram_overlap(&test, &train, order).unwrap();
            let mut smaller = train.clone();
            smaller.remove(drop % train.len());
            let reduced = corpus_ngram_overlap(&test, &smaller, order).unwrap();
            prop_assert!(reduced <= full + 1e-12);
        }
    }
}
