//! Error type shared across the crate.
//!
//! Shape and index contract violations panic (they are programming errors);
//! everything data- or environment-dependent surfaces as an [`Error`].

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// I/O failure, tagged with the path involved.
    Io { path: String, source: io::Error },
    /// A dataset line or a checkpoint file that does not obey the documented format.
    Parse { context: String, message: String },
    /// Linear system whose Cholesky factorization hit a non-positive pivot.
    SingularSystem { pivot: usize },
    /// Invalid configuration values (hyper-parameters, dimensions, flags).
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{path}: {source}"),
            Error::Parse { context, message } => write!(f, "{context}: {message}"),
            Error::SingularSystem { pivot } => {
                write!(f, "singular system: non-positive pivot at row {pivot}")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
