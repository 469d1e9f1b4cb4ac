use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AmcenError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AmcenError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("out-of-order absorption: expected time {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("history index is stale: requested time {requested} but frontier is {frontier}")]
    Stale { requested: usize, frontier: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("id out of range: {kind} {id} (limit {limit})")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        limit: usize,
    },

    #[error("mask has empty support")]
    EmptySupport,

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("non-finite loss at epoch {epoch}, time {time}, batch {batch}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        time: usize,
        batch: usize,
        value: f64,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config fingerprint mismatch: checkpoint {stored}, current {current}")]
    Fingerprint { stored: String, current: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AmcenError {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        AmcenError::DimensionMismatch(msg.into())
    }
}
