//! Radially averaged power spectra, used to check that simulated and real
//! low-field volumes share frequency behavior.

use crate::error::{KspaceError, Result};
use crate::fft::{axis_frequency, ComplexSpectrum};

/// Highest possible normalized frequency radius: corner of the [-1/2, 1/2)^3
/// frequency cube.
pub const RADIUS_MAX: f64 = 0.866_025_403_784_438_6; // 0.5 * sqrt(3)

/// Shell-averaged power |s(f)|^2 over equal-width bins of normalized
/// frequency radius on [0, RADIUS_MAX].
#[derive(Debug, Clone)]
pub struct RadialSpectrum {
    bin_centers: Vec<f64>,
    power: Vec<f64>,
    bin_counts: Vec<usize>,
    n_bins: usize,
}

impl RadialSpectrum {
    pub fn bin_centers(&self) -> &[f64] {
        &self.bin_centers
    }

    /// Mean power per shell; 0 for empty shells.
    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn bin_counts(&self) -> &[usize] {
        &self.bin_counts
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }
}

/// Averages |s(f)|^2 in spherical shells of normalized frequency radius.
pub fn radial_power_spectrum(s: &ComplexSpectrum, n_bins: usize) -> RadialSpectrum {
    assert!(n_bins >= 2, "need at least two radial bins");
    let [h, w, d] = s.shape();
    let width = RADIUS_MAX / n_bins as f64;
    let mut sum = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i0 in 0..h {
        let f0 = axis_frequency(i0, h);
        for i1 in 0..w {
            let f1 = axis_frequency(i1, w);
            for i2 in 0..d {
                let f2 = axis_frequency(i2, d);
                let r = (f0 * f0 + f1 * f1 + f2 * f2).sqrt();
                let bin = ((r / width) as usize).min(n_bins - 1);
                sum[bin] += s.data()[(i0 * w + i1) * d + i2].norm_sqr();
                counts[bin] += 1;
            }
        }
    }
    let power = sum
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let bin_centers = (0..n_bins).map(|i| (i as f64 + 0.5) * width).collect();
    RadialSpectrum {
        bin_centers,
        power,
        bin_counts: counts,
        n_bins,
    }
}

/// RMS difference of log10 shell power between two identically binned
/// spectra. Zero means matching frequency behavior.
pub fn log_spectral_distance(a: &RadialSpectrum, b: &RadialSpectrum) -> Result<f64> {
    const EPS: f64 = 1e-12;
    if a.n_bins != b.n_bins
        || a.bin_centers
            .iter()
            .zip(&b.bin_centers)
            .any(|(x, y)| (x - y).abs() > 1e-12)
    {
        return Err(KspaceError::BinningMismatch);
    }
    let sum_sq: f64 = a
        .power
        .iter()
        .zip(&b.power)
        .map(|(p, q)| {
            let d = (p + EPS).log10() - (q + EPS).log10();
            d * d
        })
        .sum();
    Ok((sum_sq / a.n_bins as f64).sqrt())
}
