use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor ops, schedules, the world generator, and I/O.
#[derive(Debug)]
pub enum Error {
    /// Two operands had incompatible shapes; both shapes are reported.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A scalar or structural argument was out of its documented range.
    InvalidArgument { what: &'static str, detail: String },
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: &'static str },
    /// Scenario generation exhausted its retry budget.
    Infeasible { detail: String },
    /// Checkpoint or dataset bytes failed validation.
    Format { detail: String },
    /// Checkpoint version on disk does not match this build.
    VersionMismatch { found: u32, expected: u32 },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::InvalidArgument { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Infeasible { detail } => write!(f, "infeasible scenario: {detail}"),
            Error::Format { detail } => write!(f, "malformed data: {detail}"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "checkpoint version {found}, this build reads {expected}")
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
