//! Dataset manifest and speaker metadata: parsing, validation and indexing.
//!
//! A manifest is a CSV with the columns `utterance_id, speaker_id,
//! transcript, intent` plus the optional `asr_hypothesis` and `audio_ref`.
//! Intent slots are joined with `|`. Speaker metadata is a CSV keyed by
//! `speaker_id` with one column per categorical attribute.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

/// Category assigned to demographic attributes that are missing or blank.
pub const UNKNOWN: &str = "unknown";

pub const INTENT_SEPARATOR: char = '|';

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("{file}: missing required column `{column}`")]
    MissingColumn { file: &'static str, column: String },

    #[error("duplicate utterance_id `{0}`")]
    DuplicateUtterance(String),

    #[error("duplicate speaker_id `{0}` in speaker metadata")]
    DuplicateSpeaker(String),

    #[error("row {row} (utterance `{utterance_id}`): transcript is empty after normalization")]
    EmptyTranscript { row: usize, utterance_id: String },

    #[error("row {row} (utterance `{utterance_id}`): intent has {found} slots, expected {expected}")]
    IntentArity {
        row: usize,
        utterance_id: String,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: empty `{column}`")]
    EmptyField { row: usize, column: String },

    #[error("speaker `{speaker_id}` attribute set differs from the metadata header")]
    AttributeMismatch { speaker_id: String },

    #[error("{file}: malformed csv: {message}")]
    Csv { file: &'static str, message: String },
}

static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").unwrap());

/// Lowercases, strips Unicode punctuation and splits on whitespace.
///
/// Returns an empty vector for input that holds no word characters; record
/// validation rejects such transcripts.
pub fn normalize_transcript(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    PUNCTUATION
        .replace_all(&lowered, "")
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Intent label tuple, e.g. `(activate, lights, kitchen)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Intent(pub Vec<String>);

impl Intent {
    pub fn parse(field: &str) -> Self {
        Intent(
            field
                .split(INTENT_SEPARATOR)
                .map(|slot| slot.trim().to_owned())
                .collect(),
        )
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, slot) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "{INTENT_SEPARATOR}")?;
            }
            f.write_str(slot)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub transcript: String,
    /// Normalized transcript tokens.
    pub tokens: Vec<String>,
    pub intent: Intent,
    pub asr_hypothesis: Option<String>,
    /// Normalized hypothesis tokens; may be empty when the recognizer output nothing.
    pub hypothesis_tokens: Option<Vec<String>>,
    /// Opaque path, never opened.
    pub audio_ref: Option<String>,
}

impl UtteranceRecord {
    pub fn new(
        utterance_id: impl Into<String>,
        speaker_id: impl Into<String>,
        transcript: impl Into<String>,
        intent: Intent,
        asr_hypothesis: Option<String>,
        audio_ref: Option<String>,
    ) -> Self {
        let transcript = transcript.into();
        let tokens = normalize_transcript(&transcript);
        let hypothesis_tokens = asr_hypothesis.as_deref().map(normalize_transcript);
        UtteranceRecord {
            utterance_id: utterance_id.into(),
            speaker_id: speaker_id.into(),
            transcript,
            tokens,
            intent,
            asr_hypothesis,
            hypothesis_tokens,
            audio_ref,
        }
    }

    /// Normalized transcript joined by single spaces; the key of the transcript index.
    pub fn normalized(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub attributes: BTreeMap<String, String>,
}

impl SpeakerProfile {
    pub fn unknown(speaker_id: impl Into<String>, attribute_names: &[String]) -> Self {
        SpeakerProfile {
            speaker_id: speaker_id.into(),
            attributes: attribute_names
                .iter()
                .map(|name| (name.clone(), UNKNOWN.to_owned()))
                .collect(),
        }
    }

    /// Attribute values in the dataset's attribute order.
    pub fn tuple(&self, attribute_names: &[String]) -> Vec<String> {
        attribute_names
            .iter()
            .map(|name| {
                self.attributes
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| UNKNOWN.to_owned())
            })
            .collect()
    }
}

/// Validated, indexed and immutable dataset.
///
/// Index values are positions in [`Dataset::records`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<UtteranceRecord>,
    profiles: BTreeMap<String, SpeakerProfile>,
    attribute_names: Vec<String>,
    transcript_index: BTreeMap<String, BTreeSet<usize>>,
    speaker_index: BTreeMap<String, BTreeSet<usize>>,
    id_index: BTreeMap<String, usize>,
}

impl Dataset {
    /// Validates records and profiles and builds every index.
    ///
    /// Speakers without a profile receive an all-[`UNKNOWN`] profile and a
    /// logged warning.
    pub fn new(
        records: Vec<UtteranceRecord>,
        profiles: Vec<SpeakerProfile>,
        attribute_names: Vec<String>,
    ) -> Result<Self, ManifestError> {
        let mut profile_map = BTreeMap::new();
        let expected: BTreeSet<&String> = attribute_names.iter().collect();
        for profile in profiles {
            if profile.attributes.keys().collect::<BTreeSet<_>>() != expected {
                return Err(ManifestError::AttributeMismatch {
                    speaker_id: profile.speaker_id,
                });
            }
            if profile_map.contains_key(&profile.speaker_id) {
                return Err(ManifestError::DuplicateSpeaker(profile.speaker_id));
            }
            profile_map.insert(profile.speaker_id.clone(), profile);
        }

        let mut id_index = BTreeMap::new();
        let mut transcript_index: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        let mut speaker_index: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        let arity = records.first().map(|r| r.intent.arity());

        for (row, record) in records.iter().enumerate() {
            if id_index.insert(record.utterance_id.clone(), row).is_some() {
                return Err(ManifestError::DuplicateUtterance(record.utterance_id.clone()));
            }
            if record.tokens.is_empty() {
                return Err(ManifestError::EmptyTranscript {
                    row: row + 1,
                    utterance_id: record.utterance_id.clone(),
                });
            }
            let expected = arity.unwrap_or_default();
            if record.intent.arity() != expected {
                return Err(ManifestError::IntentArity {
                    row: row + 1,
                    utterance_id: record.utterance_id.clone(),
                    expected,
                    found: record.intent.arity(),
                });
            }
            transcript_index
                .entry(record.normalized())
                .or_default()
                .insert(row);
            speaker_index
                .entry(record.speaker_id.clone())
                .or_default()
                .insert(row);
        }

        for speaker in speaker_index.keys() {
            if !profile_map.contains_key(speaker) {
                log::warn!("speaker `{speaker}` has no metadata; using `{UNKNOWN}` for all attributes");
                profile_map.insert(
                    speaker.clone(),
                    SpeakerProfile::unknown(speaker.clone(), &attribute_names),
                );
            }
        }

        Ok(Dataset {
            records,
            profiles: profile_map,
            attribute_names,
            transcript_index,
            speaker_index,
            id_index,
        })
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, index: usize) -> &UtteranceRecord {
        &self.records[index]
    }

    pub fn position(&self, utterance_id: &str) -> Option<usize> {
        self.id_index.get(utterance_id).copied()
    }

    pub fn profiles(&self) -> &BTreeMap<String, SpeakerProfile> {
        &self.profiles
    }

    pub fn profile(&self, speaker_id: &str) -> Option<&SpeakerProfile> {
        self.profiles.get(speaker_id)
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn transcript_index(&self) -> &BTreeMap<String, BTreeSet<usize>> {
        &self.transcript_index
    }

    pub fn speaker_index(&self) -> &BTreeMap<String, BTreeSet<usize>> {
        &self.speaker_index
    }

    pub fn has_hypotheses(&self) -> bool {
        self.records.iter().any(|r| r.hypothesis_tokens.is_some())
    }

    /// Serializes the records back to manifest CSV form.
    pub fn to_manifest_csv(&self) -> String {
        let with_asr = self.records.iter().any(|r| r.asr_hypothesis.is_some());
        let with_audio = self.records.iter().any(|r| r.audio_ref.is_some());
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["utterance_id", "speaker_id", "transcript", "intent"];
        if with_asr {
            header.push("asr_hypothesis");
        }
        if with_audio {
            header.push("audio_ref");
        }
        writer.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let mut row = vec![
                r.utterance_id.clone(),
                r.speaker_id.clone(),
                r.transcript.clone(),
                r.intent.to_string(),
            ];
            if with_asr {
                row.push(r.asr_hypothesis.clone().unwrap_or_default());
            }
            if with_audio {
                row.push(r.audio_ref.clone().unwrap_or_default());
            }
            writer.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    /// Serializes the speaker profiles to metadata CSV form.
    pub fn to_metadata_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["speaker_id".to_owned()];
        header.extend(self.attribute_names.iter().cloned());
        writer.write_record(&header).expect("in-memory write");
        for profile in self.profiles.values() {
            let mut row = vec![profile.speaker_id.clone()];
            row.extend(profile.tuple(&self.attribute_names));
            writer.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

fn column(
    headers: &csv::StringRecord,
    file: &'static str,
    name: &str,
) -> Result<usize, ManifestError> {
    optional_column(headers, name).ok_or_else(|| ManifestError::MissingColumn {
        file,
        column: name.to_owned(),
    })
}

fn optional_column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn non_blank(value: Option<&str>) -> Option<String> {
    value
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_owned)
}

fn csv_error(file: &'static str) -> impl Fn(csv::Error) -> ManifestError {
    move |e| ManifestError::Csv {
        file,
        message: e.to_string(),
    }
}

/// Parses and validates a manifest and its speaker metadata into a [`Dataset`].
pub fn parse_manifest(manifest_text: &str, metadata_text: &str) -> Result<Dataset, ManifestError> {
    const MANIFEST: &str = "manifest";
    const METADATA: &str = "speaker metadata";

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::Headers)
        .from_reader(manifest_text.as_bytes());
    let headers = reader.headers().map_err(csv_error(MANIFEST))?.clone();
    let id_col = column(&headers, MANIFEST, "utterance_id")?;
    let speaker_col = column(&headers, MANIFEST, "speaker_id")?;
    let transcript_col = column(&headers, MANIFEST, "transcript")?;
    let intent_col = column(&headers, MANIFEST, "intent")?;
    let asr_col = optional_column(&headers, "asr_hypothesis");
    let audio_col = optional_column(&headers, "audio_ref");

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_error(MANIFEST))?;
        let line = i + 1;
        let required = |col: usize, name: &str| {
            non_blank(row.get(col)).ok_or_else(|| ManifestError::EmptyField {
                row: line,
                column: name.to_owned(),
            })
        };
        let utterance_id = required(id_col, "utterance_id")?;
        let speaker_id = required(speaker_col, "speaker_id")?;
        let intent = Intent::parse(&required(intent_col, "intent")?);
        let transcript = row.get(transcript_col).unwrap_or_default().to_owned();
        let asr = asr_col.and_then(|c| row.get(c)).filter(|v| !v.is_empty());
        let audio = audio_col.and_then(|c| non_blank(row.get(c)));
        records.push(UtteranceRecord::new(
            utterance_id,
            speaker_id,
            transcript,
            intent,
            asr.map(str::to_owned),
            audio,
        ));
    }

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::Headers)
        .from_reader(metadata_text.as_bytes());
    let headers = reader.headers().map_err(csv_error(METADATA))?.clone();
    let speaker_col = column(&headers, METADATA, "speaker_id")?;
    let attribute_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != speaker_col)
        .map(|(_, h)| h.to_owned())
        .collect();

    let mut profiles = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_error(METADATA))?;
        let speaker_id = non_blank(row.get(speaker_col)).ok_or(ManifestError::EmptyField {
            row: i + 1,
            column: "speaker_id".to_owned(),
        })?;
        let attributes = headers
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != speaker_col)
            .map(|(c, name)| {
                let value = non_blank(row.get(c)).unwrap_or_else(|| UNKNOWN.to_owned());
                (name.to_owned(), value)
            })
            .collect();
        profiles.push(SpeakerProfile {
            speaker_id,
            attributes,
        });
    }

    Dataset::new(records, profiles, attribute_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MANIFEST: &str = "\
utterance_id,speaker_id,transcript,intent
u1,s1,Turn on the lights,activate|lights|none
u2,s1,\"LIGHTS, off.\",deactivate|lights|none
u3,s2,Turn on the lights in the kitchen,activate|lights|kitchen
";
    const METADATA: &str = "\
speaker_id,gender,first_language
s1,female,English
s2,male,
";

    #[test]
    fn normalizes_case_and_punctuation() {
        assert_eq!(
            normalize_transcript("Turn on the lights in the kitchen"),
            ["turn", "on", "the", "lights", "in", "the", "kitchen"]
        );
        assert_eq!(normalize_transcript("LIGHTS, off."), ["lights", "off"]);
        assert!(normalize_transcript("").is_empty());
        assert!(normalize_transcript(" ?! ... ").is_empty());
        assert_eq!(normalize_transcript("¿Qué tal?"), ["qué", "tal"]);
    }

    #[test]
    fn parses_small_manifest() {
        let ds = parse_manifest(MANIFEST, METADATA).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.profiles().len(), 2);
        assert_eq!(ds.transcript_index().len(), 3);
        assert_eq!(ds.speaker_index()["s1"].len(), 2);
        assert_eq!(ds.profile("s2").unwrap().attributes["first_language"], UNKNOWN);
        assert_eq!(ds.record(1).intent.0, ["deactivate", "lights", "none"]);
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = "utterance_id,speaker_id,transcript,intent\nu1,s1,a b,x\nu1,s2,c d,x\n";
        let err = parse_manifest(text, "speaker_id\ns1\ns2\n").unwrap_err();
        assert_eq!(err, ManifestError::DuplicateUtterance("u1".into()));
        assert!(err.to_string().contains("u1"));
    }

    #[test]
    fn rejects_missing_column() {
        let text = "utterance_id,speaker_id,intent\nu1,s1,x\n";
        let err = parse_manifest(text, "speaker_id\ns1\n").unwrap_err();
        assert!(err.to_string().contains("transcript"));
    }

    #[test]
    fn rejects_empty_transcript() {
        let text = "utterance_id,speaker_id,transcript,intent\nu1,s1,a,x\nu2,s1,\"?!\",x\n";
        let err = parse_manifest(text, "speaker_id\ns1\n").unwrap_err();
        assert_eq!(
            err,
            ManifestError::EmptyTranscript {
                row: 2,
                utterance_id: "u2".into()
            }
        );
    }

    #[test]
    fn rejects_intent_arity_change() {
        let text = "utterance_id,speaker_id,transcript,intent\nu1,s1,a,x|y\nu2,s1,b,x\n";
        assert!(matches!(
            parse_manifest(text, "speaker_id\ns1\n"),
            Err(ManifestError::IntentArity { expected: 2, found: 1, .. })
        ));
    }

    #[test]
    fn unknown_profile_for_unlisted_speaker() {
        let text = "utterance_id,speaker_id,transcript,intent\nu1,s9,a,x\n";
        let ds = parse_manifest(text, "speaker_id,gender\ns1,female\n").unwrap();
        assert_eq!(ds.profile("s9").unwrap().attributes["gender"], UNKNOWN);
    }

    #[test]
    fn optional_columns_are_carried() {
        let text = "utterance_id,speaker_id,transcript,intent,asr_hypothesis,audio_ref\n\
                    u1,s1,Turn it on,a,turn it,wavs/u1.wav\nu2,s1,off,b,,\n";
        let ds = parse_manifest(text, "speaker_id\ns1\n").unwrap();
        assert_eq!(ds.record(0).hypothesis_tokens.as_deref().unwrap(), ["turn", "it"]);
        assert_eq!(ds.record(0).audio_ref.as_deref(), Some("wavs/u1.wav"));
        assert!(ds.record(1).asr_hypothesis.is_none());
        assert!(ds.has_hypotheses());
    }

    #[test]
    fn round_trips_through_csv() {
        let ds = parse_manifest(MANIFEST, METADATA).unwrap();
        let again = parse_manifest(&ds.to_manifest_csv(), &ds.to_metadata_csv()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn indexes_invert_record_fields() {
        let ds = parse_manifest(MANIFEST, METADATA).unwrap();
        for (i, r) in ds.records().iter().enumerate() {
            assert!(ds.speaker_index()[&r.speaker_id].contains(&i));
            assert!(ds.transcript_index()[&r.normalized()].contains(&i));
            assert_eq!(ds.position(&r.utterance_id), Some(i));
        }
        let total: usize = ds.speaker_index().values().map(BTreeSet::len).sum();
        assert_eq!(total, ds.len());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(raw in "[A-Za-z ,.!?'\\-éÜ]{0,40}") {
            let once = normalize_transcript(&raw);
            prop_assert_eq!(normalize_transcript(&once.join(" ")), once);
        }
    }
}
