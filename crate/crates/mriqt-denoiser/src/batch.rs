//! Batched model input: noised volumes, conditions, steps, and the
//! per-sample condition mask used for classifier-free training.

use crate::error::{DenoiserError, Result};
use mriqt_core::VolumeGrid;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ConditionBatch {
    x_t: Vec<VolumeGrid>,
    cond: Vec<VolumeGrid>,
    t: Vec<usize>,
    cond_mask: Vec<bool>,
}

impl ConditionBatch {
    /// Builds a batch, zeroing the condition volume of every sample whose
    /// mask is false (the null condition) so the invariant holds by
    /// construction.
    pub fn new(
        x_t: Vec<VolumeGrid>,
        cond: Vec<VolumeGrid>,
        t: Vec<usize>,
        cond_mask: Vec<bool>,
    ) -> Result<Self> {
        if x_t.is_empty() {
            return Err(DenoiserError::EmptyBatch);
        }
        if x_t.len() != cond.len() || x_t.len() != t.len() || x_t.len() != cond_mask.len() {
            return Err(DenoiserError::RaggedBatch(format!(
                "x_t {}, cond {}, t {}, mask {}",
                x_t.len(),
                cond.len(),
                t.len(),
                cond_mask.len()
            )));
        }
        let shape = x_t[0].shape();
        for v in x_t.iter().chain(&cond) {
            if v.shape() != shape {
                return Err(DenoiserError::ShapeMismatch {
                    a: shape,
                    b: v.shape(),
                });
            }
        }
        let cond = cond
            .into_iter()
            .zip(&cond_mask)
            .map(|(c, &keep)| {
                if keep {
                    c
                } else {
                    let zeros = vec![0.0f32; c.num_voxels()];
                    c.with_data(zeros).expect("same length")
                }
            })
            .collect();
        Ok(Self {
            x_t,
            cond,
            t,
            cond_mask,
        })
    }

    /// All-conditional batch (every mask true).
    pub fn conditional(x_t: Vec<VolumeGrid>, cond: Vec<VolumeGrid>, t: Vec<usize>) -> Result<Self> {
        let n = x_t.len();
        Self::new(x_t, cond, t, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.x_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_t.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.x_t[0].shape()
    }

    pub fn x_t(&self) -> &[VolumeGrid] {
        &self.x_t
    }

    pub fn cond(&self) -> &[VolumeGrid] {
        &self.cond
    }

    pub fn t(&self) -> &[usize] {
        &self.t
    }

    pub fn cond_mask(&self) -> &[bool] {
        &self.cond_mask
    }
}

/// Independently drops each sample's condition with probability `p`,
/// zeroing the dropped conditions. `p = 0` keeps every mask true.
pub fn apply_cond_dropout(
    batch: ConditionBatch,
    p: f64,
    rng: &mut impl Rng,
) -> Result<ConditionBatch> {
    if !(0.0..1.0).contains(&p) {
        return Err(DenoiserError::ConfigInvalid(format!(
            "cond_drop_prob {p} outside [0,1)"
        )));
    }
    let mask: Vec<bool> = batch
        .cond_mask
        .iter()
        .map(|&m| m && rng.gen::<f64>() >= p)
        .collect();
    ConditionBatch::new(batch.x_t, batch.cond, batch.t, mask)
}
