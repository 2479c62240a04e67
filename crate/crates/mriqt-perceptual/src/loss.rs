//! Perceptual loss and the combined training objective.
//!
//! The perceptual term compares extractor features of a reconstruction and
//! its reference with SmoothL1 (Huber, δ = 1) per stage, weighted by the
//! per-stage weights. The total objective adds it to the velocity MSE,
//! scaled by λ_p and the per-step SNR weight so feature alignment fades at
//! high-noise steps where x̂₀ is mostly guesswork.

use crate::config::PerceptualConfig;
use crate::error::{PerceptualError, Result};
use crate::extractor::FeatureExtractor;
use mriqt_core::VolumeGrid;
use mriqt_diffusion::{snr_weight, NoiseSchedule};
use mriqt_nn::Tensor;

/// Mean SmoothL1 (δ=1) between two equally shaped tensors.
fn smooth_l1_mean(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x - y).abs();
        acc += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
    }
    acc / a.numel() as f64
}

/// Σ_l w_l · SmoothL1(φ_l(x̂), φ_l(x_ref)): zero iff the feature stacks
/// match wherever a weight is positive.
pub fn perceptual_loss(
    fe: &FeatureExtractor,
    x_hat: &VolumeGrid,
    x_ref: &VolumeGrid,
    cfg: &PerceptualConfig,
) -> Result<f64> {
    cfg.validate()?;
    if x_hat.shape() != x_ref.shape() {
        return Err(PerceptualError::ShapeMismatch {
            a: x_hat.shape(),
            b: x_ref.shape(),
        });
    }
    if cfg.layer_weights.len() != fe.n_stages() {
        return Err(PerceptualError::ConfigInvalid(format!(
            "{} layer weights for {} stages",
            cfg.layer_weights.len(),
            fe.n_stages()
        )));
    }
    let fa = fe.extract_features(x_hat)?;
    let fb = fe.extract_features(x_ref)?;
    Ok(fa
        .iter()
        .zip(&fb)
        .zip(&cfg.layer_weights)
        .map(|((a, b), &w)| w * smooth_l1_mean(a, b))
        .sum())
}

/// The training objective split into its logged components;
/// `total = v_mse + perceptual` holds exactly by construction, where
/// `perceptual` already carries the λ_p·w_SNR(t) factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub v_mse: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Mean squared error over voxels.
fn mse(a: &VolumeGrid, b: &VolumeGrid) -> f64 {
    let n = a.num_voxels() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// L = ‖v_pred − v_true‖²/N + λ_p·w_SNR(t)·Σ_l w_l·SmoothL1(φ_l(x̂₀), φ_l(x₀)).
pub fn total_loss(
    fe: &FeatureExtractor,
    v_pred: &VolumeGrid,
    v_true: &VolumeGrid,
    x0_hat: &VolumeGrid,
    x0: &VolumeGrid,
    t: usize,
    sch: &NoiseSchedule,
    cfg: &PerceptualConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if v_pred.shape() != v_true.shape() {
        return Err(PerceptualError::ShapeMismatch {
            a: v_pred.shape(),
            b: v_true.shape(),
        });
    }
    let v_mse = mse(v_pred, v_true);
    let perceptual = if cfg.lambda_p == 0.0 {
        0.0
    } else {
        let w_snr = if cfg.snr_weighting {
            snr_weight(t, sch, cfg.snr_kind)?
        } else {
            1.0
        };
        cfg.lambda_p * w_snr * perceptual_loss(fe, x0_hat, x0, cfg)?
    };
    Ok(LossBreakdown {
        v_mse,
        perceptual,
        total: v_mse + perceptual,
    })
}
