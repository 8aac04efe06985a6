use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: missing key `{key}`")]
    MissingKey { line: usize, key: &'static str },

    #[error("line {line}: field `{field}` id {id} is outside the vocabulary of size {vocab}")]
    IdOverflow {
        line: usize,
        field: &'static str,
        id: u64,
        vocab: usize,
    },

    #[error("line {line}: invalid record: {message}")]
    InvalidRecord { line: usize, message: String },

    #[error("ingestion error: field `{field}` id {id} is outside the vocabulary of size {vocab}")]
    Ingest {
        field: &'static str,
        id: u64,
        vocab: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (divergence, non-finite values,
    /// failed gradient checks) as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Numerical(_))
    }
}
