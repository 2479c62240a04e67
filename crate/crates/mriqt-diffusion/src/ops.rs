//! Forward noising, v-parametrization conversions, guidance merge, and the
//! reverse posterior step, all as pure functions over [`VolumeGrid`]s.
//!
//! Coefficients are computed in f64 from the schedule and applied per voxel
//! in f64 before narrowing back to the volume's f32 storage.

use crate::error::{DiffusionError, Result};
use crate::schedule::NoiseSchedule;
use mriqt_core::VolumeGrid;
use rand::Rng;
use rand_distr::StandardNormal;

fn check_same_shape(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(DiffusionError::ShapeMismatch {
            a: a.shape(),
            b: b.shape(),
        })
    }
}

fn combine(a: &VolumeGrid, ca: f64, b: &VolumeGrid, cb: f64) -> VolumeGrid {
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect();
    a.with_data(data).expect("same length as source volume")
}

/// Standard-normal noise volume with the geometry of `like`.
pub fn noise_like(like: &VolumeGrid, rng: &mut impl Rng) -> VolumeGrid {
    let data: Vec<f32> = (0..like.num_voxels())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32
        })
        .collect();
    like.with_data(data).expect("same length as source volume")
}

/// Forward noising x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
pub fn q_sample(
    x0: &VolumeGrid,
    t: usize,
    eps: &VolumeGrid,
    sch: &NoiseSchedule,
) -> Result<VolumeGrid> {
    sch.check_step(t)?;
    check_same_shape(x0, eps)?;
    let ab = sch.alpha_bar(t);
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Velocity target v = √ᾱ_t·ε − √(1−ᾱ_t)·x₀.
pub fn v_from(x0: &VolumeGrid, eps: &VolumeGrid, t: usize, sch: &NoiseSchedule) -> Result<VolumeGrid> {
    sch.check_step(t)?;
    check_same_shape(x0, eps)?;
    let ab = sch.alpha_bar(t);
    Ok(combine(eps, ab.sqrt(), x0, -(1.0 - ab).sqrt()))
}

/// Clean-image estimate x̂₀ = √ᾱ_t·x_t − √(1−ᾱ_t)·v̂.
pub fn x0_from_v(
    x_t: &VolumeGrid,
    v: &VolumeGrid,
    t: usize,
    sch: &NoiseSchedule,
) -> Result<VolumeGrid> {
    sch.check_step(t)?;
    check_same_shape(x_t, v)?;
    let ab = sch.alpha_bar(t);
    Ok(combine(x_t, ab.sqrt(), v, -(1.0 - ab).sqrt()))
}

/// Noise estimate ε = √(1−ᾱ_t)·x_t + √ᾱ_t·v, the inversion consistent with
/// [`q_sample`] and [`v_from`].
pub fn eps_from_v(
    x_t: &VolumeGrid,
    v: &VolumeGrid,
    t: usize,
    sch: &NoiseSchedule,
) -> Result<VolumeGrid> {
    sch.check_step(t)?;
    check_same_shape(x_t, v)?;
    let ab = sch.alpha_bar(t);
    Ok(combine(x_t, (1.0 - ab).sqrt(), v, ab.sqrt()))
}

/// Velocity from a noise estimate: v = (ε − √(1−ᾱ_t)·x_t)/√ᾱ_t. Lets an
/// ε-predicting model drive the same v-based sampler.
pub fn v_from_eps(
    x_t: &VolumeGrid,
    eps: &VolumeGrid,
    t: usize,
    sch: &NoiseSchedule,
) -> Result<VolumeGrid> {
    sch.check_step(t)?;
    check_same_shape(x_t, eps)?;
    let ab = sch.alpha_bar(t);
    let sab = ab.sqrt();
    Ok(combine(eps, 1.0 / sab, x_t, -(1.0 - ab).sqrt() / sab))
}

/// Classifier-free guidance settings: merge weight and the training-time
/// probability of dropping the condition.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub weight: f64,
    pub cond_drop_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            weight: 2.0,
            cond_drop_prob: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(DiffusionError::InvalidParameter(format!(
                "guidance weight {} must be finite and >= 0",
                self.weight
            )));
        }
        if !(self.cond_drop_prob >= 0.0 && self.cond_drop_prob < 1.0) {
            return Err(DiffusionError::InvalidParameter(format!(
                "cond_drop_prob {} outside [0,1)",
                self.cond_drop_prob
            )));
        }
        Ok(())
    }
}

/// Classifier-free guidance ŷ = ŷ_uc + w·(ŷ_c − ŷ_uc). Applies to either
/// v̂ or ε̂. w = 1 returns the conditional prediction bit-exactly.
pub fn cfg_merge(y_cond: &VolumeGrid, y_uncond: &VolumeGrid, w: f64) -> Result<VolumeGrid> {
    check_same_shape(y_cond, y_uncond)?;
    if w == 1.0 {
        return Ok(y_cond.clone());
    }
    if w == 0.0 {
        return Ok(y_uncond.clone());
    }
    Ok(combine(y_uncond, 1.0 - w, y_cond, w))
}

/// One reverse step x_t → x_{t−1} from a velocity prediction.
///
/// Converts v̂ to x̂₀ (clipped to [−1,1]), forms the posterior mean
/// μ_t = (√ᾱ_{t−1}β_t·x̂₀ + √α_t(1−ᾱ_{t−1})·x_t)/(1−ᾱ_t), and adds
/// √β̃_t·z for t > 1. `deterministic` suppresses the noise term entirely
/// (σ = 0), the DDIM-like limit used by convergence tests.
pub fn ddpm_step(
    x_t: &VolumeGrid,
    v_hat: &VolumeGrid,
    t: usize,
    sch: &NoiseSchedule,
    rng: &mut impl Rng,
    deterministic: bool,
) -> Result<VolumeGrid> {
    sch.check_step(t)?;
    check_same_shape(x_t, v_hat)?;
    let ab_t = sch.alpha_bar(t);
    let ab_prev = sch.alpha_bar(t - 1);
    let beta_t = sch.beta(t);
    let alpha_t = sch.alpha(t);
    let sab = ab_t.sqrt();
    let somb = (1.0 - ab_t).sqrt();

    let c0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
    let ct = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = if t > 1 && !deterministic {
        ((1.0 - ab_prev) / (1.0 - ab_t) * beta_t).sqrt()
    } else {
        0.0
    };

    let data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(v_hat.data())
        .map(|(&xt, &v)| {
            let xt = xt as f64;
            let x0 = (sab * xt - somb * v as f64).clamp(-1.0, 1.0);
            let mut out = c0 * x0 + ct * xt;
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                out += sigma * z;
            }
            out as f32
        })
        .collect();
    Ok(x_t.with_data(data).expect("same length as source volume"))
}

/// Signal-to-noise ratio ᾱ_t/(1−ᾱ_t).
pub fn snr(t: usize, sch: &NoiseSchedule) -> Result<f64> {
    sch.check_step(t)?;
    Ok(sch.snr(t))
}

/// Down-weighting applied to feature-space losses at high-noise steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum SnrWeightKind {
    /// ᾱ_t = snr/(snr+1): bounded in (0,1), monotone decreasing in t.
    #[default]
    #[serde(rename = "ALPHA_BAR")]
    AlphaBar,
    /// min(1, snr): flat at low t, decaying like ᾱ/(1−ᾱ) at high t.
    #[serde(rename = "TRUNCATED_SNR")]
    TruncatedSnr,
}

impl SnrWeightKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SnrWeightKind::AlphaBar => "ALPHA_BAR",
            SnrWeightKind::TruncatedSnr => "TRUNCATED_SNR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ALPHA_BAR" => Some(SnrWeightKind::AlphaBar),
            "TRUNCATED_SNR" => Some(SnrWeightKind::TruncatedSnr),
            _ => None,
        }
    }
}

pub fn snr_weight(t: usize, sch: &NoiseSchedule, kind: SnrWeightKind) -> Result<f64> {
    sch.check_step(t)?;
    Ok(match kind {
        SnrWeightKind::AlphaBar => sch.alpha_bar(t),
        SnrWeightKind::TruncatedSnr => sch.snr(t).min(1.0),
    })
}
