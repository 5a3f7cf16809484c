use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the mining toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        first_line: usize,
        id: String,
    },

    #[error("{path}:{line}: positive id {id:?} does not resolve to a corpus passage")]
    UnknownPassage { path: PathBuf, line: usize, id: String },

    #[error("{path}: payload size mismatch: header declares {expected} bytes of vectors, found {found}")]
    PayloadSizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: not an embedding matrix file: {message}")]
    BadHeader { path: PathBuf, message: String },

    #[error("row {id:?} has zero norm")]
    ZeroNorm { id: String },

    #[error("row {id:?} contains a non-finite value")]
    NonFinite { id: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing score for positive {id:?}")]
    MissingScore { id: String },

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("embedding service error on batch {batch}: {message}")]
    Service { batch: usize, message: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the remote embedding service rather than by local inputs.
    pub fn is_service_error(&self) -> bool {
        matches!(self, Error::Service { .. })
    }
}
