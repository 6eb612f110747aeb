use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("invalid world spec: {0}")]
    InvalidSpec(String),

    #[error("template `{template}` does not fit scene: {reason}")]
    Template { template: String, reason: String },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
