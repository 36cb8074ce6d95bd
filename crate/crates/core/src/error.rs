//! Error type shared across the crate.

/// Unified error for all fallible operations in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image dimensions do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value-level precondition failed (non-finite input, out-of-range
    /// parameter, empty slice, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration struct is internally inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset ingestion could not produce the requested split.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A key file failed structural validation. `offset` is the byte at
    /// which parsing stopped.
    #[error("malformed key file at byte {offset}: {what}")]
    MalformedKey { offset: usize, what: String },

    /// A key was generated by weights other than the ones loaded.
    #[error("digest mismatch: key was generated by different weights")]
    DigestMismatch,

    /// A checkpoint failed structural validation.
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by shape guards.
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
