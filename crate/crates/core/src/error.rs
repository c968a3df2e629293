use std::fmt;

/// Errors produced by the analysis and training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an input value failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration field is out of range; names the field.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A statistic is undefined for the given data (zero variance, single class, ...).
    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    /// Malformed binary file; `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("image decode error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidInput(msg.to_string())
    }

    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        Error::Shape(msg.to_string())
    }

    pub(crate) fn config(field: &str, reason: impl fmt::Display) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            message: msg.to_string(),
        }
    }
}
