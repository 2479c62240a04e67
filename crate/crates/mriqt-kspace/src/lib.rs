//! Frequency-domain simulation of ultra-low-field MRI from high-field
//! volumes: 3D FFT plumbing, Tikhonov-regularized transfer-function
//! estimation, filtering, and radial spectrum diagnostics.

pub mod error;
pub mod fft;
pub mod radial;
pub mod transfer;

pub use error::{KspaceError, Result};
pub use fft::{forward_fft, inverse_fft, inverse_fft_lossy, ComplexSpectrum};
pub use radial::{log_spectral_distance, radial_power_spectrum, RadialSpectrum};
pub use transfer::{
    apply_transfer, estimate_transfer, estimate_transfer_with, load_transfer, mean_pad_to_shape,
    relative_lambda, save_transfer, TransferFunction, TransferOptions,
};
