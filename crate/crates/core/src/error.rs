//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the beamforming pipeline.
#[derive(Debug)]
pub enum Error {
    /// Operands with incompatible shapes.
    Dimension { op: &'static str, detail: String },
    /// Cholesky pivot failure: the matrix is not Hermitian positive definite.
    Singular { detail: String },
    /// An argument violated an operation's contract (range, emptiness, scalarity).
    Contract { detail: String },
    /// A Transformer block produced a beamformer too small to power-normalize.
    /// `step` is the 1-based block index when known (0 for a standalone block).
    DegenerateOutput { step: usize, norm: f64 },
    /// A numerical procedure failed (bisection bracket, non-finite loss).
    Numerical { detail: String },
    /// Malformed on-disk data; `offset` is the byte position where parsing stopped.
    Parse { detail: String, offset: u64 },
    /// Configuration error attributed to a named field.
    Config { field: String, detail: String },
    /// Checkpoint version, magic, or model mismatch.
    Checkpoint { detail: String },
    /// Unsupported geometry (the token pipeline requires K == N).
    UnsupportedShape { detail: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension mismatch in {op}: {detail}"),
            Error::Singular { detail } => write!(f, "matrix not positive definite: {detail}"),
            Error::Contract { detail } => write!(f, "contract violation: {detail}"),
            Error::DegenerateOutput { step, norm } => {
                write!(f, "degenerate beamformer output at block {step}: norm {norm:.3e}")
            }
            Error::Numerical { detail } => write!(f, "numerical failure: {detail}"),
            Error::Parse { detail, offset } => {
                write!(f, "parse error at byte {offset}: {detail}")
            }
            Error::Config { field, detail } => write!(f, "config field `{field}`: {detail}"),
            Error::Checkpoint { detail } => write!(f, "checkpoint error: {detail}"),
            Error::UnsupportedShape { detail } => write!(f, "unsupported shape: {detail}"),
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
