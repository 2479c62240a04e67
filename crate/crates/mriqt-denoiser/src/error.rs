//! Error type for denoiser construction, inference, and checkpoints.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("volume shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("spatial dims {shape:?} not divisible by {factor} (model depth)")]
    IndivisibleSpatialDims { shape: [usize; 3], factor: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch field lengths differ: {0}")]
    RaggedBatch(String),
    #[error(transparent)]
    Checkpoint(#[from] mriqt_nn::CheckpointError),
    #[error(transparent)]
    Core(#[from] mriqt_core::CoreError),
    #[error(transparent)]
    Diffusion(#[from] mriqt_diffusion::DiffusionError),
}

pub type Result<T> = std::result::Result<T, DenoiserError>;
