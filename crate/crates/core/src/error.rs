//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A softmax row where every entry is masked.
    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    /// Caller violated an operation's contract (non-scalar loss, all-masked loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),

    /// Sequence longer than the model's context window.
    #[error("sequence of {len} tokens exceeds the context limit of {limit}")]
    Length { len: usize, limit: usize },

    #[error("data error: {0}")]
    Data(String),

    /// Operation not valid in the object's current state (e.g. merging twice).
    #[error("invalid state: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
