use std::path::PathBuf;

use thiserror::Error;

use crate::distrib::DistribError;
use crate::manifest::ManifestError;
use crate::objective::ConfigError;
use crate::textmetrics::MetricError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error for split construction, auditing and the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error(transparent)]
    Distrib(#[from] DistribError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("infeasible at {stage}: {constraint}")]
    Infeasible { stage: String, constraint: String },

    #[error("assignment references unknown utterance ids: {}", .0.join(", "))]
    UnknownUtterances(Vec<String>),

    #[error("assignment leaves utterances unassigned: {}", .0.join(", "))]
    Unassigned(Vec<String>),

    #[error("invalid synthetic spec: {0}")]
    Synth(String),

    #[error("invalid run config: {0}")]
    Validation(String),

    #[error("input file not found: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config/validation, 3 infeasibility, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
