//! Token-level text metrics: WER alignment with S/I/D decomposition and
//! n-gram overlap (modified precision, sentence BLEU, corpus overlap).

mod bleu;
mod wer;

use thiserror::Error;

pub use bleu::{
    corpus_ngram_overlap, ngram_counts, sentence_bleu, u_bleu, BleuWeights, ReferencePool,
    MAX_ORDER,
};
pub use wer::{
    aggregate_rates, u_wer, wer_align, wer_rates, AlignmentCounts, Averaging, UWerParams,
    WerRates,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference is empty; WER is undefined")]
    EmptyReference,

    #[error("total reference length is zero")]
    ZeroReferenceLength,

    #[error("candidate is empty")]
    EmptyCandidate,

    #[error("at least one reference is required")]
    NoReferences,

    #[error("invalid BLEU weights: {0}")]
    InvalidWeights(String),

    #[error("invalid U_WER parameter: {0}")]
    InvalidParameter(String),

    #[error("n-gram order {0} is outside 1..=4")]
    InvalidOrder(usize),

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("order {order} is inapplicable: every test transcript is shorter than {order} tokens")]
    OrderInapplicable { order: usize },
}
