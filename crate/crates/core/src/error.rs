//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl CoreError {
    /// Stable machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Io(_) => "io",
            CoreError::Ingest(_) => "ingest",
            CoreError::Data(_) => "data",
            CoreError::Config(_) => "config",
            CoreError::Numeric(_) => "numeric",
            CoreError::Shape(_) => "shape",
            CoreError::Normalization(_) => "normalization",
            CoreError::Sampling(_) => "sampling",
            CoreError::Lookup(_) => "lookup",
            CoreError::Eval(_) => "eval",
            CoreError::Train(_) => "train",
            CoreError::Checkpoint(_) => "checkpoint",
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
