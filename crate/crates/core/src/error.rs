//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("unsupported WAV encoding: {0} (expected PCM16 mono)")]
    UnsupportedWav(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("audio too short: need at least {need} samples, got {got}")]
    AudioTooShort { need: usize, got: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("training diverged at epoch {epoch} (loss {loss:.3e}); last good checkpoint retained")]
    Diverged { epoch: usize, loss: f64 },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
