//! Error type for feature extraction, perceptual losses, and start-step
//! selection.

use mriqt_core::CoreError;
use mriqt_diffusion::DiffusionError;
use mriqt_nn::CheckpointError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerceptualError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("spatial dims {shape:?} not divisible by {factor} (extractor depth)")]
    IndivisibleSpatialDims { shape: [usize; 3], factor: usize },

    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },

    #[error("no uLF/HF pairs given")]
    EmptyPairs,

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

pub type Result<T> = std::result::Result<T, PerceptualError>;
