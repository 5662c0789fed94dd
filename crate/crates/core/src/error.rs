//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller-supplied data (empty corpus, duplicate ids, missing splits).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A line of a dataset file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Shape or cache mismatch between cooperating calls.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Token id outside the embedding table.
    #[error("token id {id} out of range (vocab size {vocab_size})")]
    IndexOutOfRange { id: u32, vocab_size: usize },

    /// Malformed binary artifact (bad magic, truncation, wrong payload size).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A benchmark mode would exceed an explicit capacity limit.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
