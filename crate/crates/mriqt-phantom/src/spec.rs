//! Phantom descriptions: head geometry, tissue shells, and lesion placement.
//!
//! Intensities live on a fixed scale: background 0, tissue shells spanning
//! [`TISSUE_MIN`, `TISSUE_MAX`], and lesions at `TISSUE_MIN + delta` so that
//! class deltas land in bands disjoint from every tissue level.

use crate::error::{PhantomError, Result};
use serde::{Deserialize, Serialize};

/// Number of distinct lesion classes the generator can produce.
pub const N_LESION_CLASSES: u8 = 9;

/// Intensity of the innermost tissue shell (and the lesion reference level).
pub const TISSUE_MIN: f64 = 0.35;

/// Intensity of the outermost tissue shell.
pub const TISSUE_MAX: f64 = 0.85;

/// Head semi-axes as fractions of the volume dimensions, before the
/// per-seed jitter applied by the generator.
pub const BASE_SEMI_AXES: [f64; 3] = [0.42, 0.38, 0.40];

/// Lesion intensity offsets from [`TISSUE_MIN`], one per class.
///
/// Classes 0-2 are darker than every tissue shell (levels 0.15/0.21/0.27)
/// and classes 3-8 brighter (0.90 through 1.30 in steps of 0.08), so a
/// plain intensity statistic separates all nine.
const CLASS_DELTAS: [f64; N_LESION_CLASSES as usize] =
    [-0.20, -0.14, -0.08, 0.55, 0.63, 0.71, 0.79, 0.87, 0.95];

/// The intensity offset assigned to a lesion class.
pub fn lesion_delta_for_class(class: u8) -> Result<f64> {
    if class >= N_LESION_CLASSES {
        return Err(PhantomError::InvalidSpec(format!(
            "lesion class {class} out of range (have {N_LESION_CLASSES} classes)"
        )));
    }
    Ok(CLASS_DELTAS[class as usize])
}

/// A spherical lesion embedded in the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    /// Center in ellipsoid-normalized coordinates: each component is the
    /// offset from the head center as a fraction of that axis' semi-axis,
    /// so the Euclidean norm of `center` is the center's normalized radius.
    pub center: [f64; 3],
    /// Sphere radius as a fraction of the smallest head semi-axis.
    pub radius_frac: f64,
    /// Intensity offset from [`TISSUE_MIN`]; the lesion replaces tissue with
    /// `TISSUE_MIN + delta`.
    pub delta: f64,
    /// Class label in `0..N_LESION_CLASSES`.
    pub class: u8,
}

/// Everything needed to generate one high-field phantom deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub n_tissue_shells: usize,
    pub lesion: Option<LesionSpec>,
    /// Additive Gaussian noise level; 0 gives a piecewise-constant volume.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [16, 16, 16],
            n_tissue_shells: 4,
            lesion: None,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Checks field ranges and lesion containment.
    ///
    /// Containment uses the ellipsoid norm's triangle inequality: every
    /// point of the lesion sphere has normalized radius at most
    /// `|center| + radius_frac`, so that sum must not exceed 1. The bound
    /// is exact along the smallest axis and independent of the per-seed
    /// axis jitter, because `radius_frac` scales with the jittered axis.
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < 8) {
            return Err(PhantomError::InvalidSpec(format!(
                "shape {:?} has a dimension < 8; shells need room",
                self.shape
            )));
        }
        if self.n_tissue_shells == 0 || self.n_tissue_shells > 12 {
            return Err(PhantomError::InvalidSpec(format!(
                "n_tissue_shells {} outside 1..=12",
                self.n_tissue_shells
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(PhantomError::InvalidSpec(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        if let Some(les) = &self.lesion {
            if les.center.iter().any(|c| !c.is_finite())
                || !les.radius_frac.is_finite()
                || les.radius_frac < 0.0
                || !les.delta.is_finite()
            {
                return Err(PhantomError::InvalidSpec(
                    "lesion fields must be finite with radius_frac >= 0".into(),
                ));
            }
            lesion_delta_for_class(les.class)?;
            let rho = les.center.iter().map(|c| c * c).sum::<f64>().sqrt();
            if rho + les.radius_frac > 1.0 {
                return Err(PhantomError::InvalidGeometry(format!(
                    "lesion extends outside the head: |center| {rho:.3} + radius {:.3} > 1",
                    les.radius_frac
                )));
            }
        }
        Ok(())
    }
}
