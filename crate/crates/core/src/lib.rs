//! Optimized train/valid/test splits for decomposable spoken language
//! understanding datasets.
//!
//! Test sets are built by coordinate ascent over blocks of utterances: a
//! held-out speaker set first, then a held-out transcript set from what
//! remains, then a stratified train/valid split of the rest. Utility terms
//! match demographic, intent and length distributions (symmetrised KL) and,
//! for challenge splits, favour substitution-heavy ASR speakers and
//! transcripts with little n-gram overlap with training.

pub mod ascent;
pub mod cli;
pub mod distrib;
mod error;
pub mod exec;
pub mod manifest;
pub mod objective;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod textmetrics;

pub use error::{Error, Result};
