use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Shape or extent mismatch between tensors or against an op's contract.
    Dim(String),
    /// Invalid or contradictory configuration.
    Config(String),
    /// Operation attempted on state that is not ready (e.g. eval-mode batch
    /// norm before any training step).
    State(String),
    /// Invalid user-provided data (labels out of range, degenerate boxes, ...).
    Data(String),
    /// API misuse (non-scalar backward root, unknown flag value, ...).
    Usage(String),
    /// A function required to be deterministic produced different results on
    /// repeated evaluation.
    Determinism(String),
    /// NaN or infinity detected in checked mode.
    NonFinite(String),
    /// Continuous-time state matrix entry is not strictly negative.
    Stability(String),
    /// Metric evaluation cannot proceed (e.g. no ground truth at all).
    Eval(String),
    /// Parse failure in an on-disk artifact, with file and line context.
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Determinism(m) => write!(f, "determinism error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Stability(m) => write!(f, "stability error: {m}"),
            Error::Eval(m) => write!(f, "evaluation error: {m}"),
            Error::Parse { file, line, msg } => {
                write!(f, "parse error: {file}:{line}: {msg}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
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

/// Shorthand for building a `Dim` error.
pub fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dim(msg.into()))
}
