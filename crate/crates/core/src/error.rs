use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("non-finite entry in task {task} at coordinate {index}")]
    NonFiniteTask { task: usize, index: usize },

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("every task is achieved; the reduced simplex is empty")]
    AllAchieved,

    #[error("invalid value for `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checksum mismatch in {path}: stored {stored:016x}, computed {computed:016x}")]
    Checksum { path: PathBuf, stored: u64, computed: u64 },

    #[error("malformed file {path} at line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures rooted in data or model files (bad checksum,
    /// unreadable or malformed input).
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            Error::Checksum { .. } | Error::Parse { .. } | Error::Io { .. } | Error::Json(_)
        )
    }
}
