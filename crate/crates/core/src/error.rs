use std::io;

use thiserror::Error;

/// Errors raised by the kernels, the trainer and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty region: mask has no support")]
    EmptyRegion,

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown category id {0}")]
    UnknownCategory(usize),

    #[error("assignment needs at least {needed} queries, got {available}")]
    Capacity { needed: usize, available: usize },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
