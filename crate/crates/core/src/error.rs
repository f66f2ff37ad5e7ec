use std::fmt;
use std::io;

/// Errors raised anywhere in the engine.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    Shape(String),
    /// An op produced NaN or an infinity.
    NonFinite(String),
    /// A caller broke an operation's precondition.
    Contract(String),
    /// Malformed input text, template, rules or config.
    Parse(String),
    /// A word that no rule, vocabulary or verbalizer knows about.
    Unknown(String),
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Unknown(m) => write!(f, "unknown item: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
