use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector has no direction")]
    ZeroVector,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("adapter module requires its frozen backbone")]
    MissingBackbone,

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("no module of the requested kind in hub")]
    EmptyHub,

    #[error("hub already exists at {}", .0.display())]
    AlreadyExists(PathBuf),

    #[error("duplicate module id `{0}`")]
    DuplicateId(String),

    #[error("invalid module: {0}")]
    InvalidModule(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("correlation undefined for zero-variance input")]
    UndefinedCorrelation,

    #[error("{path}: row {row}, column {column}: {message}")]
    Csv {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("bench cell {cell} failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("write interrupted after step {0}")]
    Interrupted(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
