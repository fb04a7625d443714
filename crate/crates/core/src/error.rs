use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum DstError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Wrong magic, unsupported version or unknown tag.
    #[error("format error: {0}")]
    Format(String),

    /// Structurally invalid payload (truncation, trailing bytes, bad ordering).
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("non-finite value {value} at index {index} in group '{group}'")]
    NonFinite {
        group: String,
        index: usize,
        value: f32,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("epsilon {0} outside the valid range")]
    InvalidEpsilon(f64),

    #[error("partition overlap at index {0}")]
    PartitionOverlap(usize),

    #[error("partition gap at index {0}")]
    PartitionGap(usize),

    #[error("seed checksum mismatch: expected {expected:#018x}, found {found:#018x}")]
    ChecksumMismatch { expected: u64, found: u64 },

    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("unknown task id '{0}'")]
    UnknownTask(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),
}

impl DstError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DstError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DstError> = std::result::Result<T, E>;
