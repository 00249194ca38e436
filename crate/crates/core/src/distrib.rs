//! Smoothed discrete distributions and the symmetrised KL divergence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::Dataset;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DistribError {
    #[error("union support is empty")]
    EmptySupport,

    #[error("smoothing epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),

    #[error("count key outside the supplied support")]
    KeyOutsideSupport,

    #[error("distributions have different supports")]
    SupportMismatch,

    #[error("speaker subset is empty")]
    EmptySubset,

    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),
}

/// Probability vector over an ordered support, smoothed so every entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution<K> {
    support: Vec<K>,
    probabilities: Vec<f64>,
    epsilon: f64,
}

impl<K: Ord + Clone> DiscreteDistribution<K> {
    /// `p(k) = (count(k) + eps) / (total + eps * |support|)`.
    pub fn from_counts(
        counts: &BTreeMap<K, u64>,
        union_support: &BTreeSet<K>,
        epsilon: f64,
    ) -> Result<Self, DistribError> {
        if union_support.is_empty() {
            return Err(DistribError::EmptySupport);
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(DistribError::InvalidEpsilon(epsilon));
        }
        if counts.keys().any(|k| !union_support.contains(k)) {
            return Err(DistribError::KeyOutsideSupport);
        }
        let dense: Vec<f64> = union_support
            .iter()
            .map(|k| counts.get(k).copied().unwrap_or(0) as f64)
            .collect();
        Ok(DiscreteDistribution {
            support: union_support.iter().cloned().collect(),
            probabilities: smooth(&dense, epsilon),
            epsilon,
        })
    }

    pub fn probability(&self, key: &K) -> Option<f64> {
        self.support
            .binary_search(key)
            .ok()
            .map(|i| self.probabilities[i])
    }
}

impl<K> DiscreteDistribution<K> {
    pub fn support(&self) -> &[K] {
        &self.support
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Additively smoothed probabilities from dense counts.
pub fn smooth(counts: &[f64], epsilon: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + epsilon * counts.len() as f64;
    counts.iter().map(|c| (c + epsilon) / total).collect()
}

/// `KL(p||q) + KL(q||p)` on dense, strictly positive vectors of equal length.
///
/// Each term is `(p - q)(ln p - ln q)`, which is exactly antisymmetric
/// factor by factor, so the result is bit-for-bit symmetric.
pub fn jeffreys(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .sum()
}

/// Symmetrised KL between two count vectors over the same support after smoothing.
pub fn jeffreys_from_counts(a: &[f64], b: &[f64], epsilon: f64) -> f64 {
    jeffreys(&smooth(a, epsilon), &smooth(b, epsilon))
}

/// Jeffreys divergence `KL(p||q) + KL(q||p)` in nats.
pub fn symmetrised_kl<K: PartialEq>(
    p: &DiscreteDistribution<K>,
    q: &DiscreteDistribution<K>,
) -> Result<f64, DistribError> {
    if p.support != q.support {
        return Err(DistribError::SupportMismatch);
    }
    Ok(jeffreys(&p.probabilities, &q.probabilities))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemographicMode {
    /// One category per full attribute tuple.
    #[default]
    Joint,
    /// Sum of per-attribute KLs.
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlSettings {
    #[serde(default)]
    pub demographic_mode: DemographicMode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for KlSettings {
    fn default() -> Self {
        KlSettings {
            demographic_mode: DemographicMode::Joint,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

fn speaker_tuples<'a, I>(dataset: &Dataset, speakers: I) -> Result<Vec<Vec<String>>, DistribError>
where
    I: IntoIterator<Item = &'a str>,
{
    let unique: BTreeSet<&str> = speakers.into_iter().collect();
    if unique.is_empty() {
        return Err(DistribError::EmptySubset);
    }
    unique
        .into_iter()
        .map(|s| {
            dataset
                .profile(s)
                .map(|p| p.tuple(dataset.attribute_names()))
                .ok_or_else(|| DistribError::UnknownSpeaker(s.to_owned()))
        })
        .collect()
}

fn all_speaker_tuples(dataset: &Dataset) -> Vec<Vec<String>> {
    dataset
        .speaker_index()
        .keys()
        .filter_map(|s| dataset.profile(s))
        .map(|p| p.tuple(dataset.attribute_names()))
        .collect()
}

/// Joint distribution of demographic tuples over a speaker subset, one
/// count per distinct speaker, smoothed over every tuple in the dataset.
pub fn demographic_distribution<'a, I>(
    dataset: &Dataset,
    speakers: I,
    epsilon: f64,
) -> Result<DiscreteDistribution<Vec<String>>, DistribError>
where
    I: IntoIterator<Item = &'a str>,
{
    let tuples = speaker_tuples(dataset, speakers)?;
    let support: BTreeSet<Vec<String>> = all_speaker_tuples(dataset).into_iter().collect();
    let mut counts = BTreeMap::new();
    for t in tuples {
        *counts.entry(t).or_insert(0u64) += 1;
    }
    DiscreteDistribution::from_counts(&counts, &support, epsilon)
}

/// Per-attribute distributions, in attribute order.
pub fn marginal_distributions<'a, I>(
    dataset: &Dataset,
    speakers: I,
    epsilon: f64,
) -> Result<Vec<DiscreteDistribution<String>>, DistribError>
where
    I: IntoIterator<Item = &'a str>,
{
    let tuples = speaker_tuples(dataset, speakers)?;
    let all = all_speaker_tuples(dataset);
    (0..dataset.attribute_names().len())
        .map(|a| {
            let support: BTreeSet<String> = all.iter().map(|t| t[a].clone()).collect();
            let mut counts = BTreeMap::new();
            for t in &tuples {
                *counts.entry(t[a].clone()).or_insert(0u64) += 1;
            }
            DiscreteDistribution::from_counts(&counts, &support, epsilon)
        })
        .collect()
}

/// Demographic divergence between two speaker sets under `settings`.
pub fn demographic_kl<'a, I, J>(
    dataset: &Dataset,
    a: I,
    b: J,
    settings: &KlSettings,
) -> Result<f64, DistribError>
where
    I: IntoIterator<Item = &'a str>,
    J: IntoIterator<Item = &'a str>,
{
    match settings.demographic_mode {
        DemographicMode::Joint => {
            let p = demographic_distribution(dataset, a, settings.epsilon)?;
            let q = demographic_distribution(dataset, b, settings.epsilon)?;
            symmetrised_kl(&p, &q)
        }
        DemographicMode::Marginal => {
            let p = marginal_distributions(dataset, a, settings.epsilon)?;
            let q = marginal_distributions(dataset, b, settings.epsilon)?;
            p.iter()
                .zip(&q)
                .map(|(p, q)| symmetrised_kl(p, q))
                .sum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::parse_manifest;
    use proptest::prelude::*;

    fn support(keys: &[&'static str]) -> BTreeSet<&'static str> {
        keys.iter().copied().collect()
    }

    #[test]
    fn from_counts_examples() {
        let counts = BTreeMap::from([("a", 1u64), ("b", 1)]);
        let d = DiscreteDistribution::from_counts(&counts, &support(&["a", "b"]), 1e-12).unwrap();
        assert!((d.probability(&"a").unwrap() - 0.5).abs() < 1e-12);

        let counts = BTreeMap::from([("a", 3u64)]);
        let d = DiscreteDistribution::from_counts(&counts, &support(&["a", "b"]), 1.0).unwrap();
        assert!((d.probability(&"a").unwrap() - 0.8).abs() < 1e-15);
        assert!((d.probability(&"b").unwrap() - 0.2).abs() < 1e-15);

        let d = DiscreteDistribution::from_counts(&BTreeMap::new(), &support(&["a", "b"]), 1.0)
            .unwrap();
        assert_eq!(d.probabilities(), &[0.5, 0.5]);
    }

    #[test]
    fn from_counts_errors() {
        let empty: BTreeSet<&str> = BTreeSet::new();
        assert_eq!(
            DiscreteDistribution::from_counts(&BTreeMap::new(), &empty, 1.0),
            Err(DistribError::EmptySupport)
        );
        let counts = BTreeMap::from([("z", 1u64)]);
        assert_eq!(
            DiscreteDistribution::from_counts(&counts, &support(&["a"]), 1.0),
            Err(DistribError::KeyOutsideSupport)
        );
        assert_eq!(
            DiscreteDistribution::from_counts(&BTreeMap::new(), &support(&["a"]), 0.0),
            Err(DistribError::InvalidEpsilon(0.0))
        );
    }

    #[test]
    fn mismatched_supports_rejected() {
        let p = DiscreteDistribution::from_counts(&BTreeMap::new(), &support(&["a"]), 1.0).unwrap();
        let q = DiscreteDistribution::from_counts(&BTreeMap::new(), &support(&["b"]), 1.0).unwrap();
        assert_eq!(symmetrised_kl(&p, &q), Err(DistribError::SupportMismatch));
    }

    const MANIFEST: &str = "utterance_id,speaker_id,transcript,intent\n\
        u1,s1,a,x\nu2,s2,a,x\nu3,s3,a,x\nu4,s4,a,x\nu5,s4,b,x\nu6,s4,c,x\n";
    const METADATA: &str = "speaker_id,gender,lang\n\
        s1,f,en\ns2,f,en\ns3,f,en\ns4,m,fr\n";

    #[test]
    fn demographic_counts_speakers_not_utterances() {
        let ds = parse_manifest(MANIFEST, METADATA).unwrap();
        let held = demographic_distribution(&ds, ["s4"], 1e-6).unwrap();
        let key = vec!["m".to_owned(), "fr".to_owned()];
        assert!(held.probability(&key).unwrap() > 0.999);
        let all = demographic_distribution(&ds, ["s1", "s2", "s3", "s4"], 1e-6).unwrap();
        assert!((all.probability(&key).unwrap() - 0.25).abs() < 1e-5);
        // repeating a speaker does not change its weight
        let dup = demographic_distribution(&ds, ["s1", "s4", "s4", "s4"], 1e-6).unwrap();
        assert!((dup.probability(&key).unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn demographic_kl_self_is_zero() {
        let ds = parse_manifest(MANIFEST, METADATA).unwrap();
        let s = ["s1", "s2", "s3", "s4"];
        let settings = KlSettings::default();
        assert_eq!(demographic_kl(&ds, s, s, &settings).unwrap(), 0.0);
        let marginal = KlSettings {
            demographic_mode: DemographicMode::Marginal,
            ..settings
        };
        assert_eq!(demographic_kl(&ds, s, s, &marginal).unwrap(), 0.0);
        assert!(demographic_kl(&ds, ["s1"], ["s4"], &marginal).unwrap() > 0.0);
        assert_eq!(
            demographic_kl(&ds, Vec::<&str>::new(), s, &settings),
            Err(DistribError::EmptySubset)
        );
    }

    proptest! {
        #[test]
        fn from_counts_normalizes(counts in prop::collection::vec(0u64..1000, 1..12), eps in 1e-9..10.0f64) {
            let keys: BTreeSet<usize> = (0..counts.len()).collect();
            let map: BTreeMap<usize, u64> = counts.iter().copied().enumerate().collect();
            let d = DiscreteDistribution::from_counts(&map, &keys, eps).unwrap();
            let sum: f64 = d.probabilities().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(d.probabilities().iter().all(|&p| p > 0.0));
        }
    }
}
