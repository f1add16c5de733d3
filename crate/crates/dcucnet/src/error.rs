//! Library-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DcucError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("synthesis error: {0}")]
    Synthesis(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checkpoint integrity: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: loss is not finite")]
    TrainingDiverged { step: usize },
    #[error("non-deterministic op: {0}")]
    Nondeterminism(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DcucError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DcucError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DcucError>;
