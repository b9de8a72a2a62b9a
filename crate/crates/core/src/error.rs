use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sampling produced a non-finite state at step {step}")]
    Sampling { step: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    /// Whether the failure stems from numerics (non-finite values, divergence)
    /// rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Sampling { .. } | Error::Training(_)
        )
    }
}
