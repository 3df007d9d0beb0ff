//! Error type shared by every module of the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Zero-norm vectors, empty instruction text, empty shards and the like.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Matrix or adapter dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Run or scenario configuration fails validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A NaN or infinity showed up where the numeric pipeline requires finite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A strategy name was not found in its registry.
    #[error("unknown strategy `{name}` (available: {available})")]
    UnknownStrategy { name: String, available: String },

    /// An operation that needs at least one cache entry was called on an empty cache.
    #[error("empty cache: {0}")]
    EmptyCache(&'static str),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
