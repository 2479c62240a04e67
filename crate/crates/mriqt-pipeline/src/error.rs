//! Error type for training and sampling orchestration.

use mriqt_core::CoreError;
use mriqt_denoiser::DenoiserError;
use mriqt_diffusion::DiffusionError;
use mriqt_nn::CheckpointError;
use mriqt_perceptual::PerceptualError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("step {step} outside range {lo}..={hi}")]
    StepOutOfRange { step: usize, lo: usize, hi: usize },

    #[error("no training pairs given")]
    EmptyTrainingSet,

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Diffusion(#[from] DiffusionError),

    #[error(transparent)]
    Denoiser(#[from] DenoiserError),

    #[error(transparent)]
    Perceptual(#[from] PerceptualError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
