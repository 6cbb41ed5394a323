use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("direction is undefined: {0}")]
    Degenerate(&'static str),

    #[error("round mismatch: node is at round {node}, fitness is for round {fitness}")]
    RoundMismatch { node: u32, fitness: u32 },

    #[error("fitness history has no entry for round {0}")]
    HistoryGap(u32),

    #[error(
        "client {client} desynchronized at round {round}: model fingerprint {actual:016x}, expected {expected:016x}"
    )]
    Desync {
        client: u32,
        round: u32,
        expected: u64,
        actual: u64,
    },

    #[error("malformed message: {0}")]
    Wire(String),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated file (needs {needed} bytes, has {actual})")]
    Truncated {
        path: PathBuf,
        needed: usize,
        actual: usize,
    },

    #[error("item count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{0}")]
    Config(#[from] crate::experiment::ConfigError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures are user errors; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument { .. })
    }
}
