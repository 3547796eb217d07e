//! Crate-wide error type.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by matrix algebra, model construction, training and I/O.
#[derive(Debug)]
pub enum Error {
    /// Two operands had incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A class label was outside `0..classes`.
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    /// An adapter rank was rejected for the host layer.
    InvalidRank { d1: usize, d2: usize, rank: usize },
    /// A scalar or structural argument failed validation.
    InvalidArgument(String),
    /// A config file failed to parse or validate; `key` names the offending path.
    Config { key: String, message: String },
    /// A checkpoint or report file was malformed.
    Format(String),
    /// Provenance checksums disagree (e.g. adapters trained against a different backbone).
    ChecksumMismatch { expected: String, found: String },
    /// Training produced a non-finite loss and was aborted.
    Diverged { step: usize, loss: f64 },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::LabelOutOfRange {
                row,
                label,
                classes,
            } => write!(
                f,
                "label {label} in row {row} is out of range for {classes} classes"
            ),
            Error::InvalidRank { d1, d2, rank } => write!(
                f,
                "rank {rank} invalid for a {d1}x{d2} layer (need 1 <= r <= min(d1,d2) and (d1+d2)*r < d1*d2)"
            ),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config { key, message } => write!(f, "config error at `{key}`: {message}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::ChecksumMismatch { expected, found } => {
                write!(f, "checksum mismatch: expected {expected}, found {found}")
            }
            Error::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss})")
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
