//! Deterministic synthetic datasets with planted demographic mixtures,
//! paraphrase families and per-speaker-group ASR corruption rates.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::normalize_transcript;
use crate::{Error, Result};

/// Size of the out-of-vocabulary pool used for substitutions and insertions.
const OOV_POOL: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub value: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    /// Intent tuple in manifest form, e.g. `activate|lights`.
    pub label: String,
    /// Paraphrases; `transcripts_per_intent` of them are drawn.
    pub templates: Vec<String>,
}

/// Token corruption probabilities for one speaker group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrGroup {
    pub name: String,
    /// Relative share of speakers.
    pub weight: f64,
    pub substitution: f64,
    pub insertion: f64,
    pub deletion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    /// Per-speaker utterance counts vary uniformly by up to this much.
    pub utterance_spread: usize,
    pub transcripts_per_intent: usize,
    pub intents: Vec<IntentSpec>,
    pub attributes: Vec<AttributeSpec>,
    pub asr_groups: Vec<AsrGroup>,
}

fn categories(pairs: &[(&str, f64)]) -> Vec<Category> {
    pairs
        .iter()
        .map(|&(value, weight)| Category {
            value: value.to_owned(),
            weight,
        })
        .collect()
}

fn paraphrases(verbs: &[&str], objects: &[&str], extra: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for prefix in ["", "please "] {
        for suffix in ["", " now"] {
            for verb in verbs {
                for object in objects {
                    out.push(format!("{prefix}{verb} {object}{suffix}"));
                }
            }
        }
    }
    out.extend(extra.iter().map(|s| s.to_string()));
    out
}

impl Default for SynthSpec {
    fn default() -> Self {
        let on = ["turn on", "switch on", "start"];
        let off = ["turn off", "switch off", "stop"];
        let up = ["turn up", "raise", "increase"];
        let down = ["turn down", "lower", "decrease"];
        let lights = ["the lights", "the lamp", "lights"];
        let music = ["the music", "the radio", "music"];
        let volume = ["the volume", "the sound", "volume"];
        let heat = ["the heating", "the temperature", "heat"];
        let intent = |label: &str, templates: Vec<String>| IntentSpec {
            label: label.to_owned(),
            templates,
        };
        SynthSpec {
            seed: 17,
            speakers: 60,
            utterances_per_speaker: 33,
            utterance_spread: 6,
            transcripts_per_intent: 15,
            intents: vec![
                intent("activate|lights", paraphrases(&on, &lights, &["lights on", "i need some light", "make it bright in here"])),
                intent("deactivate|lights", paraphrases(&off, &lights, &["lights off", "kill the lights", "make it dark"])),
                intent("activate|music", paraphrases(&on, &music, &["play some songs", "put on a tune", "i want music"])),
                intent("deactivate|music", paraphrases(&off, &music, &["silence please", "no more songs", "pause playback"])),
                intent("increase|volume", paraphrases(&up, &volume, &["louder please", "i cannot hear that", "make it louder"])),
                intent("decrease|volume", paraphrases(&down, &volume, &["quieter please", "too loud", "keep it down"])),
                intent("increase|heat", paraphrases(&up, &heat, &["it is freezing", "warm it up", "i am cold"])),
                intent("decrease|heat", paraphrases(&down, &heat, &["it is too hot", "cool it down", "i am sweating"])),
            ],
            attributes: vec![
                AttributeSpec {
                    name: "gender".to_owned(),
                    categories: categories(&[("female", 0.5), ("male", 0.5)]),
                },
                AttributeSpec {
                    name: "first_language".to_owned(),
                    categories: categories(&[("english", 0.6), ("other", 0.4)]),
                },
            ],
            asr_groups: vec![
                AsrGroup {
                    name: "clear".to_owned(),
                    weight: 0.5,
                    substitution: 0.02,
                    insertion: 0.01,
                    deletion: 0.01,
                },
                AsrGroup {
                    name: "noisy".to_owned(),
                    weight: 0.5,
                    substitution: 0.10,
                    insertion: 0.01,
                    deletion: 0.02,
                },
            ],
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Synth(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Same spec with every corruption probability set to zero.
    pub fn without_corruption(mut self) -> Self {
        for g in &mut self.asr_groups {
            g.substitution = 0.0;
            g.insertion = 0.0;
            g.deletion = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Synth(m));
        if self.speakers == 0 || self.utterances_per_speaker == 0 || self.transcripts_per_intent == 0 {
            return fail("speaker, utterance and transcript counts must be positive".into());
        }
        if self.utterance_spread >= self.utterances_per_speaker {
            return fail("utterance_spread must be below utterances_per_speaker".into());
        }
        if self.intents.is_empty() {
            return fail("intent inventory is empty".into());
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        let positive_weights = |w: &mut dyn Iterator<Item = f64>| {
            let w: Vec<f64> = w.collect();
            !w.is_empty() && w.iter().all(|x| x.is_finite() && *x >= 0.0) && w.iter().sum::<f64>() > 0.0
        };
        for a in &self.attributes {
            if !positive_weights(&mut a.categories.iter().map(|c| c.weight)) {
                return fail(format!("attribute `{}` needs non-negative weights with a positive sum", a.name));
            }
        }
        if !positive_weights(&mut self.asr_groups.iter().map(|g| g.weight)) {
            return fail("asr_groups need non-negative weights with a positive sum".into());
        }
        for g in &self.asr_groups {
            if ![g.substitution, g.insertion, g.deletion].into_iter().all(unit)
                || g.substitution + g.deletion > 1.0
            {
                return fail(format!(
                    "group `{}`: probabilities must lie in [0,1] and substitution + deletion <= 1",
                    g.name
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for intent in &self.intents {
            if intent.templates.len() < self.transcripts_per_intent {
                return fail(format!(
                    "intent `{}` has {} templates but {} unique transcripts were requested",
                    intent.label,
                    intent.templates.len(),
                    self.transcripts_per_intent
                ));
            }
            for t in &intent.templates {
                let tokens = normalize_transcript(t);
                if tokens.is_empty() {
                    return fail(format!("intent `{}` has an empty template", intent.label));
                }
                if tokens.iter().any(|w| w.starts_with("oov")) {
                    return fail(format!("template `{t}` collides with the oov token pool"));
                }
                if !seen.insert(tokens.join(" ")) {
                    return fail(format!("template `{t}` appears more than once"));
                }
            }
        }
        let total = self.intents.len() * self.transcripts_per_intent;
        if self.utterances_per_speaker + self.utterance_spread > total {
            return fail(format!(
                "speakers read distinct transcripts, but only {total} exist for up to {} utterances each",
                self.utterances_per_speaker + self.utterance_spread
            ));
        }
        Ok(())
    }
}

/// Generated manifest pair plus the hidden ASR group of every speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest: String,
    pub metadata: String,
    pub speaker_groups: BTreeMap<String, String>,
}

fn corrupt(tokens: &[String], group: &AsrGroup, rng: &mut ChaCha8Rng) -> Vec<String> {
    let oov = |rng: &mut ChaCha8Rng| format!("oov{}", rng.gen_range(0..OOV_POOL));
    let mut out = Vec::with_capacity(tokens.len() + 2);
    for token in tokens {
        let u: f64 = rng.gen();
        if u < group.deletion {
            // dropped
        } else if u < group.deletion + group.substitution {
            out.push(oov(rng));
        } else {
            out.push(token.clone());
        }
        if rng.gen::<f64>() < group.insertion {
            out.push(oov(rng));
        }
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<(String, String)> {
    generate_detailed(spec).map(|o| (o.manifest, o.metadata))
}

pub fn generate_detailed(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut inventory: Vec<(&str, String)> = Vec::new();
    for intent in &spec.intents {
        let mut templates: Vec<&String> = intent.templates.iter().collect();
        templates.shuffle(&mut rng);
        templates.truncate(spec.transcripts_per_intent);
        templates.sort();
        inventory.extend(templates.into_iter().map(|t| (intent.label.as_str(), t.clone())));
    }

    let width = spec.speakers.to_string().len().max(3);
    let group_pick = WeightedIndex::new(spec.asr_groups.iter().map(|g| g.weight))
        .map_err(|e| Error::Synth(e.to_string()))?;
    let attribute_picks: Vec<WeightedIndex<f64>> = spec
        .attributes
        .iter()
        .map(|a| WeightedIndex::new(a.categories.iter().map(|c| c.weight)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Synth(e.to_string()))?;

    let mut meta = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["speaker_id"];
    header.extend(spec.attributes.iter().map(|a| a.name.as_str()));
    meta.write_record(&header).expect("in-memory write");

    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest
        .write_record(["utterance_id", "speaker_id", "transcript", "intent", "asr_hypothesis"])
        .expect("in-memory write");

    let mut speaker_groups = BTreeMap::new();
    let mut next_utterance = 0usize;
    for s in 0..spec.speakers {
        let speaker_id = format!("spk{:0width$}", s + 1);
        let mut row = vec![speaker_id.clone()];
        for (a, pick) in spec.attributes.iter().zip(&attribute_picks) {
            row.push(a.categories[pick.sample(&mut rng)].value.clone());
        }
        meta.write_record(&row).expect("in-memory write");
        let group = &spec.asr_groups[group_pick.sample(&mut rng)];
        speaker_groups.insert(speaker_id.clone(), group.name.clone());

        let spread = spec.utterance_spread as i64;
        let count = (spec.utterances_per_speaker as i64 + rng.gen_range(-spread..=spread)) as usize;
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, inventory.len(), count).into_vec();
        chosen.sort_unstable();
        for t in chosen {
            let (label, transcript) = &inventory[t];
            let hypothesis = corrupt(&normalize_transcript(transcript), group, &mut rng).join(" ");
            next_utterance += 1;
            manifest
                .write_record([
                    format!("utt{next_utterance:06}").as_str(),
                    speaker_id.as_str(),
                    transcript.as_str(),
                    label,
                    hypothesis.as_str(),
                ])
                .expect("in-memory write");
        }
    }

    let text = |w: csv::Writer<Vec<u8>>| String::from_utf8(w.into_inner().expect("flush")).expect("utf-8");
    Ok(SynthOutput {
        manifest: text(manifest),
        metadata: text(meta),
        speaker_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::parse_manifest;
    use crate::textmetrics::{wer_align, AlignmentCounts};

    #[test]
    fn default_spec_parses() {
        let spec = SynthSpec::default();
        let (m, meta) = generate(&spec).unwrap();
        let ds = parse_manifest(&m, &meta).unwrap();
        assert_eq!(ds.profiles().len(), 60);
        assert_eq!(ds.transcript_index().len(), 120);
        assert!((1700..=2300).contains(&ds.len()));
        assert!(ds.records().iter().all(|r| (2..=6).contains(&r.tokens.len())));
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec { seed: 18, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn zero_corruption_reproduces_transcripts() {
        let spec = SynthSpec::default().without_corruption();
        let (m, meta) = generate(&spec).unwrap();
        let ds = parse_manifest(&m, &meta).unwrap();
        let total: AlignmentCounts = ds
            .records()
            .iter()
            .map(|r| wer_align(&r.tokens, r.hypothesis_tokens.as_ref().unwrap()).unwrap())
            .sum();
        assert_eq!(total.edits(), 0);
    }

    #[test]
    fn planted_substitution_rates_recovered() {
        let mut spec = SynthSpec {
            speakers: 120,
            ..SynthSpec::default()
        };
        spec.asr_groups[0].insertion = 0.0;
        spec.asr_groups[1].insertion = 0.0;
        let out = generate_detailed(&spec).unwrap();
        let ds = parse_manifest(&out.manifest, &out.metadata).unwrap();
        let mut per_group: BTreeMap<&str, AlignmentCounts> = BTreeMap::new();
        for r in ds.records() {
            let Some(h) = &r.hypothesis_tokens else { continue };
            *per_group.entry(out.speaker_groups[&r.speaker_id].as_str()).or_default() += wer_align(&r.tokens, h).unwrap();
        }
        for (group, planted) in [("clear", 0.02), ("noisy", 0.10)] {
            let c = per_group[group];
            assert!(c.reference_length >= 2000, "{group}: {}", c.reference_length);
            let rate = c.substitutions as f64 / c.reference_length as f64;
            assert!((rate - planted).abs() <= 0.02, "{group}: {rate}");
        }
    }

    #[test]
    fn demographic_frequencies_converge() {
        let spec = SynthSpec {
            speakers: 500,
            utterances_per_speaker: 3,
            utterance_spread: 0,
            ..SynthSpec::default()
        };
        let (m, meta) = generate(&spec).unwrap();
        let ds = parse_manifest(&m, &meta).unwrap();
        for a in &spec.attributes {
            for c in &a.categories {
                let n = ds.profiles().values().filter(|p| p.attributes[&a.name] == c.value).count();
                let freq = n as f64 / 500.0;
                assert!((freq - c.weight).abs() <= 0.05, "{}={}: {freq}", a.name, c.value);
            }
        }
    }

    #[test]
    fn small_inventory_rejected() {
        let spec = SynthSpec {
            transcripts_per_intent: 100,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Synth(m)) if m.contains("templates")));
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = SynthSpec::default();
        assert_eq!(SynthSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let partial = SynthSpec::from_toml("speakers = 10\nseed = 3\n").unwrap();
        assert_eq!(partial.speakers, 10);
        assert_eq!(partial.intents.len(), 8);
    }
}
