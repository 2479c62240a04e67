//! The 3D scalar volume type shared by every stage of the pipeline.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Acquisition/provenance tag carried by every volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    /// High-field reference scan.
    #[serde(rename = "HF")]
    HF,
    /// Measured ultra-low-field scan (or its surrogate stand-in).
    #[serde(rename = "ULF_REAL")]
    UlfReal,
    /// Ultra-low-field scan synthesized through the k-space transfer function.
    #[serde(rename = "ULF_SIM")]
    UlfSim,
    /// Output of the diffusion sampler.
    #[serde(rename = "GENERATED")]
    Generated,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::HF => "HF",
            Modality::UlfReal => "ULF_REAL",
            Modality::UlfSim => "ULF_SIM",
            Modality::Generated => "GENERATED",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "HF" => Some(Modality::HF),
            "ULF_REAL" => Some(Modality::UlfReal),
            "ULF_SIM" => Some(Modality::UlfSim),
            "GENERATED" => Some(Modality::Generated),
            _ => None,
        }
    }
}

/// A 3D scalar intensity field with voxel spacing and modality tag.
///
/// Data is stored row-major as `(H, W, D)` with the D axis fastest:
/// `idx = (h * W + w) * D + d`. Every constructed volume satisfies the
/// type invariants: all dims >= 4, all voxels finite, spacing positive.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    data: Vec<f32>,
    shape: [usize; 3],
    spacing_mm: [f32; 3],
    modality: Modality,
    subject_id: String,
}

impl VolumeGrid {
    /// Builds a volume, validating the type invariants.
    pub fn new(
        data: Vec<f32>,
        shape: [usize; 3],
        spacing_mm: [f32; 3],
        modality: Modality,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        if shape.iter().any(|&d| d < 4) {
            return Err(CoreError::InvalidVolume(format!(
                "shape {:?} has a dimension < 4",
                shape
            )));
        }
        let n = shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(CoreError::InvalidVolume(format!(
                "data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                shape,
                n
            )));
        }
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(CoreError::NonFiniteData { count: bad });
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::InvalidVolume(format!(
                "spacing {:?} must be strictly positive",
                spacing_mm
            )));
        }
        Ok(Self {
            data,
            shape,
            spacing_mm,
            modality,
            subject_id: subject_id.into(),
        })
    }

    /// All-zero volume with unit spacing.
    pub fn zeros(shape: [usize; 3], modality: Modality, subject_id: &str) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        Self::new(vec![0.0; n], shape, [1.0; 3], modality, subject_id)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn at(&self, h: usize, w: usize, d: usize) -> f32 {
        let [_, wd, dd] = self.shape;
        self.data[(h * wd + w) * dd + d]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, v: f32) {
        let [_, wd, dd] = self.shape;
        self.data[(h * wd + w) * dd + d] = v;
    }

    /// Same volume with a different modality tag.
    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    /// Same volume with a different subject id.
    pub fn with_subject_id(mut self, subject_id: impl Into<String>) -> Self {
        self.subject_id = subject_id.into();
        self
    }

    /// Same geometry and tags, new voxel data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(
            data,
            self.shape,
            self.spacing_mm,
            self.modality,
            self.subject_id.clone(),
        )
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        let s: f64 = self.data.iter().map(|&v| v as f64).sum();
        s / self.data.len() as f64
    }

    /// True when shapes match elementwise.
    pub fn same_shape(&self, other: &VolumeGrid) -> bool {
        self.shape == other.shape
    }
}
