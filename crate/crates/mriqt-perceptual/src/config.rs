//! Extractor architecture and perceptual-objective configuration.

use crate::error::{PerceptualError, Result};
use mriqt_diffusion::SnrWeightKind;
use serde::{Deserialize, Serialize};

/// Stage layout of the feature extractor. Each stage is two 3³ convs plus a
/// strided-conv downsample, so depth = `channels.len()` halvings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Output channels per stage; at least 3 stages.
    pub channels: Vec<usize>,
    /// Input channels (1 for scalar intensity volumes).
    #[serde(default = "one")]
    pub in_channels: usize,
}

fn one() -> usize {
    1
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            in_channels: 1,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 3 {
            return Err(PerceptualError::ConfigInvalid(format!(
                "extractor needs >= 3 stages, got {}",
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(PerceptualError::ConfigInvalid(
                "channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the perceptual term in the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// Per-stage weights w_l; must match the extractor's stage count where
    /// used, with at least one positive entry when lambda_p > 0.
    pub layer_weights: Vec<f64>,
    /// Strength of the perceptual term relative to the velocity MSE.
    pub lambda_p: f64,
    /// Scales the perceptual term by the per-step SNR weight; off means a
    /// constant weight of 1 at every step.
    pub snr_weighting: bool,
    /// Which SNR weight to use when `snr_weighting` is on.
    #[serde(default)]
    pub snr_kind: SnrWeightKind,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            layer_weights: vec![1.0, 1.0, 1.0],
            lambda_p: 0.25,
            snr_weighting: true,
            snr_kind: SnrWeightKind::AlphaBar,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_p < 0.0 || !self.lambda_p.is_finite() {
            return Err(PerceptualError::ConfigInvalid(format!(
                "lambda_p must be finite and >= 0, got {}",
                self.lambda_p
            )));
        }
        if self.layer_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(PerceptualError::ConfigInvalid(
                "layer weights must be finite and >= 0".into(),
            ));
        }
        if self.lambda_p > 0.0 && !self.layer_weights.iter().any(|&w| w > 0.0) {
            return Err(PerceptualError::ConfigInvalid(
                "lambda_p > 0 requires at least one positive layer weight".into(),
            ));
        }
        Ok(())
    }
}
