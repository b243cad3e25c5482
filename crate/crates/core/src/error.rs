//! Crate-wide error type.

use std::fmt;

/// Errors produced by any pipeline stage.
#[derive(Debug)]
pub enum Error {
    /// Arguments violate an operation's preconditions (bad shapes, ranges, kinds).
    InvalidInput(String),
    /// A cloud or image file failed to parse; carries the 1-based line number.
    Parse { line: usize, message: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A run configuration is inconsistent or insufficient.
    Config(String),
    /// An operation was invoked out of order (e.g. reading gradients before backward).
    State(String),
    /// A caller broke an API contract (e.g. optimizing a mask against a trainable model).
    Contract(String),
    /// A non-finite value appeared mid-computation; carries where.
    Numeric { context: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(m) => write!(f, "invalid-input: {m}"),
            Error::Parse { line, message } => write!(f, "parse: line {line}: {message}"),
            Error::Io(e) => write!(f, "io: {e}"),
            Error::Config(m) => write!(f, "config: {m}"),
            Error::State(m) => write!(f, "state: {m}"),
            Error::Contract(m) => write!(f, "contract: {m}"),
            Error::Numeric { context } => write!(f, "numeric: {context}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
