//! Crate-wide error type with process exit-code mapping for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("incompatible parameter sets: {0}")]
    IncompatibleParams(String),

    #[error("bad aggregation weights: {0}")]
    BadWeights(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss at round {round}, iteration {iteration}: {detail}")]
    NonFiniteLoss {
        round: usize,
        iteration: usize,
        detail: String,
    },

    #[error("teacher pretraining gate failed: achieved macro DSC {achieved:.4} < required {required:.4}")]
    GateFailure { achieved: f64, required: f64 },

    #[error("degenerate phantom geometry for index {index}: no valid placement after {attempts} attempts")]
    DegenerateGeometry { index: u64, attempts: usize },

    #[error("missing or incomplete run artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("refusing to overwrite non-empty directory {0} (use --force)")]
    NonEmptyDir(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code: 1 usage/config, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } | Error::GateFailure { .. } => 2,
            Error::Io(_)
            | Error::Json(_)
            | Error::MissingArtifact(_)
            | Error::CheckpointFormat(_)
            | Error::NonEmptyDir(_) => 3,
            _ => 2,
        }
    }
}
