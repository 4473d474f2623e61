use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value produced by op #{op_id} ({op})")]
    NumericalError { op_id: usize, op: &'static str },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("labels of length {labels} cannot be aligned to {frames} frames")]
    InfeasibleAlignment { frames: usize, labels: usize },

    #[error("oracle search space too large: {0}")]
    OracleTooLarge(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("training aborted at step {step} (last good checkpoint: {}): {source}", checkpoint.display())]
    TrainingAborted { step: usize, checkpoint: PathBuf, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptCheckpoint { path: path.into(), reason: reason.into() }
    }
}
