use alloc::string::String;
use core::fmt;

/// Error type shared by every module in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor/layer shape mismatch.
    Shape(String),
    /// A forward op produced a non-finite value; carries the op name.
    Numeric(String),
    /// Invalid input data (NaN samples, empty signal, malformed values).
    InvalidInput(String),
    /// Bad configuration (thresholds, dimensions, unknown keys).
    Config(String),
    /// Streaming state machine misuse: out-of-order blocks, double init.
    Stream(String),
    /// Text parse failure; carries a message with the line number.
    Parse(String),
    /// Index outside a map or buffer domain.
    Range(String),
    /// Checkpoint container problems (magic, version, truncation).
    Checkpoint(String),
    /// Scoring preconditions (e.g. empty reference).
    Scoring(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Stream(m) => write!(f, "stream error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Range(m) => write!(f, "range error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Scoring(m) => write!(f, "scoring error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! err {
    ($kind:ident, $($arg:tt)*) => {
        $crate::error::Error::$kind(alloc::format!($($arg)*))
    };
}
pub(crate) use err;
