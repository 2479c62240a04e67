//! Minimal preprocessing: intensity normalization, isotropic resampling,
//! and center crop/pad.

use crate::error::{CoreError, Result};
use crate::volume::VolumeGrid;

/// Affine-maps intensities to `[-1, 1]` (min -> -1, max -> +1).
///
/// The map is monotone, so intensity ordering is preserved. Constant
/// volumes are rejected rather than silently mapped: a flat image here
/// almost always means an acquisition or simulation failure upstream.
pub fn normalize_unit(v: &VolumeGrid) -> Result<VolumeGrid> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(CoreError::ConstantVolume);
    }
    let scale = 2.0f64 / (hi as f64 - lo as f64);
    let data = v
        .data()
        .iter()
        .map(|&x| ((x as f64 - lo as f64) * scale - 1.0) as f32)
        .collect();
    v.with_data(data)
}

/// Inverse of [`normalize_unit`]: maps `[-1, 1]` back to `[lo, hi]`.
pub fn denormalize_unit(v: &VolumeGrid, lo: f32, hi: f32) -> Result<VolumeGrid> {
    let half = (hi as f64 - lo as f64) / 2.0;
    let data = v
        .data()
        .iter()
        .map(|&x| ((x as f64 + 1.0) * half + lo as f64) as f32)
        .collect();
    v.with_data(data)
}

/// Trilinear resampling onto an isotropic grid with the given spacing.
///
/// The new shape along each axis is `round(old_dim * old_spacing / target)`.
/// Sample coordinates are corner-aligned (`src = i * target / old_spacing`)
/// so resampling at the current spacing is the identity.
pub fn resample_iso(v: &VolumeGrid, target_spacing_mm: f32) -> Result<VolumeGrid> {
    if !(target_spacing_mm > 0.0) || !target_spacing_mm.is_finite() {
        return Err(CoreError::InvalidVolume(format!(
            "target spacing {target_spacing_mm} must be positive"
        )));
    }
    let old = v.shape();
    let sp = v.spacing_mm();
    let mut new_shape = [0usize; 3];
    for a in 0..3 {
        let n = (old[a] as f64 * sp[a] as f64 / target_spacing_mm as f64).round() as usize;
        if n < 4 {
            return Err(CoreError::DegenerateTarget { dim: n });
        }
        new_shape[a] = n;
    }

    let [oh, ow, od] = old;
    let ratio = [
        target_spacing_mm as f64 / sp[0] as f64,
        target_spacing_mm as f64 / sp[1] as f64,
        target_spacing_mm as f64 / sp[2] as f64,
    ];
    let src = v.data();
    let mut out = vec![0.0f32; new_shape[0] * new_shape[1] * new_shape[2]];

    // Split i*ratio into floor index + fractional weight, clamped to the grid.
    let prep = |n_new: usize, n_old: usize, r: f64| -> Vec<(usize, usize, f64)> {
        (0..n_new)
            .map(|i| {
                let x = (i as f64 * r).min(n_old as f64 - 1.0);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_old - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let hh = prep(new_shape[0], oh, ratio[0]);
    let ww = prep(new_shape[1], ow, ratio[1]);
    let dd = prep(new_shape[2], od, ratio[2]);

    let mut idx = 0usize;
    for &(h0, h1, fh) in &hh {
        for &(w0, w1, fw) in &ww {
            let base00 = (h0 * ow + w0) * od;
            let base01 = (h0 * ow + w1) * od;
            let base10 = (h1 * ow + w0) * od;
            let base11 = (h1 * ow + w1) * od;
            for &(d0, d1, fd) in &dd {
                let c000 = src[base00 + d0] as f64;
                let c001 = src[base00 + d1] as f64;
                let c010 = src[base01 + d0] as f64;
                let c011 = src[base01 + d1] as f64;
                let c100 = src[base10 + d0] as f64;
                let c101 = src[base10 + d1] as f64;
                let c110 = src[base11 + d0] as f64;
                let c111 = src[base11 + d1] as f64;
                let c00 = c000 + (c001 - c000) * fd;
                let c01 = c010 + (c011 - c010) * fd;
                let c10 = c100 + (c101 - c100) * fd;
                let c11 = c110 + (c111 - c110) * fd;
                let c0 = c00 + (c01 - c00) * fw;
                let c1 = c10 + (c11 - c10) * fw;
                out[idx] = (c0 + (c1 - c0) * fh) as f32;
                idx += 1;
            }
        }
    }

    VolumeGrid::new(
        out,
        new_shape,
        [target_spacing_mm; 3],
        v.modality(),
        v.subject_id(),
    )
}

/// Center crop and/or symmetric zero-pad to the exact target shape.
///
/// When `old > target` along an axis the volume is cropped starting at
/// `(old - target) / 2`; when `old < target` it is padded with
/// `(target - old) / 2` leading zeros (integer division, so any odd
/// remainder goes to the trailing side).
pub fn crop_or_pad(v: &VolumeGrid, target_shape: [usize; 3]) -> Result<VolumeGrid> {
    if target_shape.iter().any(|&d| d < 4) {
        return Err(CoreError::DegenerateTarget {
            dim: *target_shape.iter().min().unwrap(),
        });
    }
    let old = v.shape();
    let [th, tw, td] = target_shape;

    // For each axis: (source start, dest start, run length).
    let plan = |o: usize, t: usize| -> (usize, usize, usize) {
        if o >= t {
            ((o - t) / 2, 0, t)
        } else {
            (0, (t - o) / 2, o)
        }
    };
    let (sh, dh, nh) = plan(old[0], th);
    let (sw, dw, nw) = plan(old[1], tw);
    let (sd, dd, nd) = plan(old[2], td);

    let src = v.data();
    let [_, ow, od] = old;
    let mut out = vec![0.0f32; th * tw * td];
    for h in 0..nh {
        for w in 0..nw {
            let s0 = ((sh + h) * ow + (sw + w)) * od + sd;
            let d0 = ((dh + h) * tw + (dw + w)) * td + dd;
            out[d0..d0 + nd].copy_from_slice(&src[s0..s0 + nd]);
        }
    }

    VolumeGrid::new(out, target_shape, v.spacing_mm(), v.modality(), v.subject_id())
}
