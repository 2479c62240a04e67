//! Error type for diffusion-math operations.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("step {t} outside schedule range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("schedule length must be at least 2, got {0}")]
    InvalidT(usize),
    #[error("volume shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("malformed schedule file: {0}")]
    MalformedSchedule(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("schedule i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;
