use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants carry enough structure for the CLI to map
/// them onto stable exit codes and for tests to match on causes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("matmul: inner dimensions disagree, {lhs:?} x {rhs:?}")]
    InnerDimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("parameter {name} has no gradient (call zero_grad/backward first)")]
    MissingGrad { name: String },

    #[error("frame mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("camera sampling rejected {0} draws; box/shell intersection looks empty")]
    CameraSampling(u64),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("missing frame: {0}")]
    MissingFrame(String),

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("tracking lost: both views untracked for more than {limit} consecutive frames (at frame {frame})")]
    TrackingLost { frame: usize, limit: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;
