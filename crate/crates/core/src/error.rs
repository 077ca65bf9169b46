use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoraError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to any parameter that requires a gradient")]
    Detached,

    #[error("backward was already run on this graph; record a new one")]
    BackwardReused,

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Cell {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoraError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoraError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoraError::Config(_) => 2,
            CoraError::Data(_)
            | CoraError::Cell { .. }
            | CoraError::Io(_)
            | CoraError::Csv(_)
            | CoraError::Json(_)
            | CoraError::Checkpoint(_) => 3,
            CoraError::Diverged { .. } | CoraError::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
