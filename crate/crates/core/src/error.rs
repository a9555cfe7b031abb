use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Caller violated a documented precondition (shape mismatch, bad range, ...).
    InvalidArgument(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A file exists but its contents are not what we expect
    /// (bad magic, version mismatch, checksum failure, malformed manifest).
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
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

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for constructing `Error::InvalidArgument`.
pub fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
