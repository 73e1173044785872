use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector{}", .row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    ZeroVector { row: Option<usize> },

    #[error("feature block has no rows")]
    EmptyBlock,

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("record {index} ({name:?}) pools to a zero-norm key")]
    ZeroKey { index: usize, name: String },

    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("memory is empty")]
    EmptyMemory,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward pass called without a matching forward cache")]
    StaleCache,

    #[error("caption has no tokens")]
    EmptyCaption,

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
