// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input")]
    EmptyInput,

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("layer {layer} out of range (allowed 0..={max})")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("duplicate injection at layer {layer}, position {position}")]
    DuplicateInjection { layer: usize, position: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("classifier: {0}")]
    Classifier(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{} already exists; pass --overwrite to replace it", .0.display())]
    WouldOverwrite(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
