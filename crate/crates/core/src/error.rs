use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {actual})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("label {label} is outside the class bank (size {size})")]
    LabelOutOfRange { label: usize, size: usize },
    #[error("empty prompt set")]
    EmptyPrompts,
    #[error("fused probabilities have zero total mass")]
    ZeroMass,
    #[error("cannot cluster {points} points into {k} clusters")]
    TooFewPoints { points: usize, k: usize },
    #[error("trajectory has no category votes")]
    NoVotes,
    #[error("degenerate scenario: {0}")]
    Degenerate(String),
    #[error("malformed input in {path}: lines {lines:?}")]
    Malformed { path: PathBuf, lines: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}
