//! Error type for k-space estimation and simulation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KspaceError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },

    #[error("singular frequency at index {index:?}: lambda = 0 and all HF spectra vanish there")]
    SingularFrequency { index: [usize; 3] },

    #[error("non-negligible imaginary residue after inverse FFT: {rel:.3e} relative (limit {limit:.1e})")]
    NonNegligibleImaginary { rel: f64, limit: f64 },

    #[error("radial spectra have different binning")]
    BinningMismatch,

    #[error("transfer estimation needs at least one pair")]
    EmptyPairs,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Core(#[from] mriqt_core::CoreError),
}

pub type Result<T> = std::result::Result<T, KspaceError>;
