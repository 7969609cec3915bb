use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate domain spec: {0}")]
    DegenerateSpec(String),

    #[error("dataset error in {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("click out of bounds: ({row}, {col}) in {height}x{width}")]
    ClickOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("click ordinal out of order: expected {expected}, got {got}")]
    Ordinal { expected: u32, got: u32 },

    #[error("prediction already matches ground truth; no click needed")]
    NoErrorRegion,

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("parameter partition error: {0}")]
    Partition(String),

    #[error("parameter structure mismatch: {0}")]
    Structure(String),

    #[error("stale tape: recorded against parameter stamp {tape}, parameters are at {params}")]
    StaleTape { tape: u64, params: u64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("session error: {0}")]
    Session(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
