//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: lhs {lhs:?}, rhs {rhs:?}")]
    Dimension {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    Value(String),
    #[error("index {index} out of range {len}: {context}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("zero variance in paired differences; statistic undefined")]
    ZeroVariance,
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint incompatible with config: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
