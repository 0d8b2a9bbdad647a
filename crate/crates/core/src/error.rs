//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the public
/// operations document: shape mismatches, contract violations, invalid
/// configs (with the offending field named), cache capacity, bad inputs,
/// quantization policy gaps, and I/O / format problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("quantization policy: {0}")]
    Policy(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }
}
