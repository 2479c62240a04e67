//! Surrogate low-field scanner: anisotropic blur, radial k-space low-pass,
//! and Rician noise applied to a high-field phantom.
//!
//! The stage mix is deliberately outside the linear-filter family a
//! Tikhonov-estimated transfer function can represent exactly — the blur
//! and low-pass are linear but the Rician magnitude is not — so estimating
//! a transfer function against this surrogate is an approximation task,
//! as it is against a physical scanner.

use crate::error::Result;
use crate::PhantomError;
use mriqt_core::{Modality, VolumeGrid};
use mriqt_kspace::fft::axis_frequency;
use mriqt_kspace::{forward_fft, inverse_fft_lossy};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Degradation stage parameters. Each stage has a disabled setting under
/// which it leaves the volume untouched bit for bit: zero blur sigma, a
/// low-pass fraction of 1 or more, zero noise sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeConfig {
    /// Gaussian blur sigma per axis in voxels; anisotropic by default,
    /// strongest along the last (slice) axis.
    pub blur_sigma: [f64; 3],
    /// Butterworth cutoff as a fraction of the axis Nyquist frequency;
    /// values >= 1 disable the stage.
    pub lowpass_frac: f64,
    /// Butterworth order; higher is a sharper roll-off.
    pub lowpass_order: u32,
    /// Rician channel noise sigma; applied as a two-channel magnitude, so
    /// the output is non-negative wherever it acts.
    pub noise_sigma: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            blur_sigma: [0.7, 0.7, 1.4],
            lowpass_frac: 0.6,
            lowpass_order: 4,
            noise_sigma: 0.02,
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(PhantomError::InvalidSpec(format!(
                "blur_sigma {:?} must be finite and >= 0",
                self.blur_sigma
            )));
        }
        if !self.lowpass_frac.is_finite() || self.lowpass_frac <= 0.0 {
            return Err(PhantomError::InvalidSpec(format!(
                "lowpass_frac {} must be finite and > 0",
                self.lowpass_frac
            )));
        }
        if self.lowpass_order == 0 {
            return Err(PhantomError::InvalidSpec(
                "lowpass_order must be >= 1".into(),
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(PhantomError::InvalidSpec(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// 1D Gaussian convolution along one axis with zero padding at the borders.
fn blur_axis(src: &[f64], shape: [usize; 3], axis: usize, sigma: f64) -> Vec<f64> {
    let reach = (4.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * reach + 1) as usize);
    for o in -reach..=reach {
        kernel.push((-0.5 * (o as f64 / sigma).powi(2)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }

    let [sh, sw, sd] = shape;
    let strides = [sw * sd, sd, 1usize];
    let stride = strides[axis] as i64;
    let len = shape[axis] as i64;
    let mut out = vec![0.0f64; src.len()];
    let mut idx = 0usize;
    for h in 0..sh {
        for w in 0..sw {
            for d in 0..sd {
                let pos = [h as i64, w as i64, d as i64][axis];
                let mut acc = 0.0;
                for (ki, o) in (-reach..=reach).enumerate() {
                    let p = pos + o;
                    if p >= 0 && p < len {
                        acc += kernel[ki] * src[(idx as i64 + o * stride) as usize];
                    }
                }
                out[idx] = acc;
                idx += 1;
            }
        }
    }
    out
}

/// Multiplies the spectrum by a radial Butterworth response
/// `(1 + (r/cutoff)^(2·order))^(-1/2)` and transforms back. The response
/// is real and even in frequency, so the imaginary residue stays at
/// round-off level.
fn radial_lowpass(v: &VolumeGrid, frac: f64, order: u32) -> Result<VolumeGrid> {
    let mut s = forward_fft(v);
    let [sh, sw, sd] = s.shape();
    let cutoff = 0.5 * frac;
    let exp2n = 2 * order as i32;
    let data = s.data_mut();
    let mut idx = 0usize;
    for i0 in 0..sh {
        let f0 = axis_frequency(i0, sh);
        for i1 in 0..sw {
            let f1 = axis_frequency(i1, sw);
            for i2 in 0..sd {
                let f2 = axis_frequency(i2, sd);
                let r = (f0 * f0 + f1 * f1 + f2 * f2).sqrt();
                let gain: f64 = 1.0 / (1.0 + (r / cutoff).powi(exp2n)).sqrt();
                data[idx] *= gain;
                idx += 1;
            }
        }
    }
    let (out, _residue) = inverse_fft_lossy(&s)?;
    Ok(out)
}

/// Simulates the surrogate low-field scan of a high-field volume.
///
/// Stages run in acquisition order — spatial blur, k-space low-pass,
/// Rician noise — each skipped at its disabled setting, so the all-disabled
/// config returns the input data unchanged (modality switched to the real
/// low-field tag). The caller's rng is consumed only by the noise stage,
/// two standard-normal draws per voxel in index order.
pub fn degrade_reference<R: Rng>(
    hf: &VolumeGrid,
    cfg: &DegradeConfig,
    rng: &mut R,
) -> Result<VolumeGrid> {
    cfg.validate()?;
    let shape = hf.shape();
    let mut cur: Vec<f64> = hf.data().iter().map(|&x| x as f64).collect();

    for axis in 0..3 {
        if cfg.blur_sigma[axis] > 0.0 {
            cur = blur_axis(&cur, shape, axis, cfg.blur_sigma[axis]);
        }
    }

    if cfg.lowpass_frac < 1.0 {
        let v = VolumeGrid::new(
            cur.iter().map(|&x| x as f32).collect(),
            shape,
            hf.spacing_mm(),
            hf.modality(),
            hf.subject_id(),
        )?;
        let filtered = radial_lowpass(&v, cfg.lowpass_frac, cfg.lowpass_order)?;
        cur = filtered.data().iter().map(|&x| x as f64).collect();
    }

    if cfg.noise_sigma > 0.0 {
        let s = cfg.noise_sigma;
        for v in &mut cur {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let re = *v + s * z1;
            let im = s * z2;
            *v = (re * re + im * im).sqrt();
        }
    }

    let out = VolumeGrid::new(
        cur.iter().map(|&x| x as f32).collect(),
        shape,
        hf.spacing_mm(),
        Modality::UlfReal,
        hf.subject_id(),
    )?;
    Ok(out)
}

/// Sum of shell power, weighted by shell population, over the top half of
/// the radial bins. Used by tests and pilots to verify the degradation
/// genuinely removes high-frequency content.
pub fn top_half_radial_power(v: &VolumeGrid, n_bins: usize) -> f64 {
    let r = mriqt_kspace::radial_power_spectrum(&forward_fft(v), n_bins);
    r.power()
        .iter()
        .zip(r.bin_counts())
        .skip(n_bins / 2)
        .map(|(p, &c)| p * c as f64)
        .sum()
}
