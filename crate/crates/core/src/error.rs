use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("corpus {0} contains no documents")]
    EmptyCorpus(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid prompt pair: {0}")]
    InvalidPrompt(String),

    #[error("word {word:?} occurs {count} times, at least {required} needed")]
    InsufficientOccurrences { word: String, count: usize, required: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    TrainingDiverged { epoch: usize },

    #[error("non-finite value produced in flow layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("model not fitted: {0}")]
    NotFitted(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("embedding table is empty")]
    EmptyTable,

    #[error("backend {backend} failed: {message}")]
    Backend { backend: String, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("cell {cell} needs {needed} instances but only {available} are available")]
    InsufficientCell { cell: String, needed: usize, available: usize },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, message: message.into() }
    }

    pub(crate) fn backend(backend: &str, message: impl Into<String>) -> Self {
        Error::Backend { backend: backend.to_string(), message: message.into() }
    }
}
