//! 3D DFT on volumes.
//!
//! Convention (fixed so golden files stay portable): unnormalized forward
//! transform, 1/N on the inverse. The DC component sits at index (0,0,0).

use crate::error::{KspaceError, Result};
use mriqt_core::{Modality, VolumeGrid};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Relative imaginary-residue ceiling for a strict inverse transform.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-5;

/// Frequency-domain representation of a volume, DC at (0,0,0).
///
/// Carries the source grid's metadata so the inverse transform can rebuild
/// a full volume.
#[derive(Debug, Clone)]
pub struct ComplexSpectrum {
    data: Vec<Complex64>,
    shape: [usize; 3],
    spacing_mm: [f32; 3],
    modality: Modality,
    subject_id: String,
}

impl ComplexSpectrum {
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn subject_id(&self) -> &str {
        self.subject_id.as_str()
    }

    pub fn with_modality(mut self, m: Modality) -> Self {
        self.modality = m;
        self
    }

    /// Total spectral energy sum(|s(f)|^2).
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Runs `fft` along one axis of a (H, W, D) array stored D-fastest.
fn transform_axis(data: &mut [Complex64], shape: [usize; 3], axis: usize, fft: &Arc<dyn Fft<f64>>) {
    let [h, w, d] = shape;
    let n = shape[axis];
    let mut line = vec![Complex64::default(); n];
    match axis {
        2 => {
            for row in data.chunks_exact_mut(d) {
                fft.process(row);
            }
        }
        1 => {
            for hh in 0..h {
                for dd in 0..d {
                    for ww in 0..w {
                        line[ww] = data[(hh * w + ww) * d + dd];
                    }
                    fft.process(&mut line);
                    for ww in 0..w {
                        data[(hh * w + ww) * d + dd] = line[ww];
                    }
                }
            }
        }
        0 => {
            for ww in 0..w {
                for dd in 0..d {
                    for hh in 0..h {
                        line[hh] = data[(hh * w + ww) * d + dd];
                    }
                    fft.process(&mut line);
                    for hh in 0..h {
                        data[(hh * w + ww) * d + dd] = line[hh];
                    }
                }
            }
        }
        _ => unreachable!("axis: {axis}"),
    }
}

fn transform3d(data: &mut [Complex64], shape: [usize; 3], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    for axis in 0..3 {
        let fft = if inverse {
            planner.plan_fft_inverse(shape[axis])
        } else {
            planner.plan_fft_forward(shape[axis])
        };
        transform_axis(data, shape, axis, &fft);
    }
}

/// Forward 3D DFT (unnormalized).
pub fn forward_fft(v: &VolumeGrid) -> ComplexSpectrum {
    let shape = v.shape();
    let mut data: Vec<Complex64> = v
        .data()
        .iter()
        .map(|&x| Complex64::new(x as f64, 0.0))
        .collect();
    transform3d(&mut data, shape, false);
    ComplexSpectrum {
        data,
        shape,
        spacing_mm: v.spacing_mm(),
        modality: v.modality(),
        subject_id: v.subject_id().to_string(),
    }
}

fn inverse_impl(s: &ComplexSpectrum) -> (Vec<f32>, f64) {
    let [h, w, d] = s.shape;
    let n = (h * w * d) as f64;
    let mut data = s.data.clone();
    transform3d(&mut data, s.shape, true);
    let mut im_sq = 0.0f64;
    let mut total_sq = 0.0f64;
    for c in &data {
        im_sq += (c.im / n) * (c.im / n);
        total_sq += c.norm_sqr() / (n * n);
    }
    let rel = if total_sq > 0.0 {
        (im_sq / total_sq).sqrt()
    } else {
        0.0
    };
    let real: Vec<f32> = data.iter().map(|c| (c.re / n) as f32).collect();
    (real, rel)
}

/// Inverse 3D DFT (scaled by 1/N). Errors if the imaginary residue exceeds
/// [`IMAG_RESIDUE_LIMIT`] relative L2; use [`inverse_fft_lossy`] to discard
/// the residue unconditionally.
pub fn inverse_fft(s: &ComplexSpectrum) -> Result<VolumeGrid> {
    let (real, rel) = inverse_impl(s);
    if rel > IMAG_RESIDUE_LIMIT {
        return Err(KspaceError::NonNegligibleImaginary {
            rel,
            limit: IMAG_RESIDUE_LIMIT,
        });
    }
    Ok(VolumeGrid::new(
        real,
        s.shape,
        s.spacing_mm,
        s.modality,
        s.subject_id.clone(),
    )?)
}

/// Inverse 3D DFT keeping only the real part. Returns the volume and the
/// relative imaginary residue that was discarded.
pub fn inverse_fft_lossy(s: &ComplexSpectrum) -> Result<(VolumeGrid, f64)> {
    let (real, rel) = inverse_impl(s);
    let v = VolumeGrid::new(real, s.shape, s.spacing_mm, s.modality, s.subject_id.clone())?;
    Ok((v, rel))
}

/// Normalized frequency coordinate of index `k` on an axis of length `n`,
/// in cycles per voxel, range [-0.5, 0.5).
pub fn axis_frequency(k: usize, n: usize) -> f64 {
    if k <= (n - 1) / 2 {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}
