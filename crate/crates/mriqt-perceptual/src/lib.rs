//! Perceptual machinery for volumetric image quality transfer: a VGG-style
//! 3D feature extractor trained by cross-validated classification, a
//! multi-scale SmoothL1 perceptual loss, the combined training objective
//! (velocity MSE + SNR-weighted perceptual term), an LPIPS-style perceptual
//! distance, and the start-step search that finds where noised uLF and HF
//! volumes become perceptually interchangeable.

mod config;
mod distance;
mod error;
mod extractor;
mod loss;
mod train;

pub use config::{ExtractorConfig, PerceptualConfig};
pub use distance::{perceptual_distance, select_k, SelectKResult};
pub use error::{PerceptualError, Result};
pub use extractor::FeatureExtractor;
pub use loss::{perceptual_loss, total_loss, LossBreakdown};
pub use train::{train_extractor, CvReport, ExtractorTrainConfig};
