//! Crate-wide error type with a stable mapping onto CLI exit codes.

use thiserror::Error;

/// Errors surfaced by the public API.
///
/// The CLI maps each variant class to an exit code: argument/usage errors
/// exit 1, data and format errors exit 2, numeric failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("argument error: {0}")]
    Argument(String),

    /// A file, directory, or serialized payload is malformed or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced non-finite values or otherwise failed numerically.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Exit code for the CLI contract (0 is success and never produced here).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }

    /// Short machine-parsable kind tag used on the diagnostic stream.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "usage",
            Error::Data(_) | Error::Io(_) => "data",
            Error::Numeric(_) => "numeric",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
