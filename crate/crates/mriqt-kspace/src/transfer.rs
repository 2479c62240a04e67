//! Complex K-space transfer function between field strengths.
//!
//! From paired uLF–HF volumes with spectra X_i = F{uLF_i}, Y_i = F{HF_i},
//! the per-frequency Tikhonov-regularized least-squares fit
//!
//!   S(f) = argmin_S  sum_i |X_i(f) - S·Y_i(f)|^2 + lambda·|S|^2
//!
//! has the closed form S(f) = sum_i X_i(f)·conj(Y_i(f)) / (sum_i |Y_i(f)|^2
//! + lambda). Applying S to a held-out HF spectrum and inverting yields a
//! physics-consistent synthetic uLF volume.

use crate::error::{KspaceError, Result};
use crate::fft::{forward_fft, inverse_fft, inverse_fft_lossy};
use mriqt_core::{CoreError, Modality, VolumeGrid};
use num_complex::Complex64;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct TransferOptions {
    /// Symmetrize S(f) <- (S(f) + conj(S(-f))) / 2 so the filter maps real
    /// volumes to real volumes. On by default.
    pub hermitian: bool,
    /// Mean-pad volumes to the elementwise-max shape before the FFT instead
    /// of requiring identical shapes. Off by default (strict shapes).
    pub pad_to_common: bool,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            hermitian: true,
            pad_to_common: false,
        }
    }
}

/// The estimated complex filter plus the settings that produced it.
#[derive(Debug, Clone)]
pub struct TransferFunction {
    s: Vec<Complex64>,
    shape: [usize; 3],
    lambda_reg: f64,
    n_pairs: usize,
    hermitian_enforced: bool,
}

impl TransferFunction {
    pub fn s(&self) -> &[Complex64] {
        &self.s
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn hermitian_enforced(&self) -> bool {
        self.hermitian_enforced
    }
}

/// Pads `v` to `target` (each axis >= current), centered, filling new
/// voxels with the volume mean to limit the step the FFT sees at the edge.
pub fn mean_pad_to_shape(v: &VolumeGrid, target: [usize; 3]) -> Result<VolumeGrid> {
    let shape = v.shape();
    if target == shape {
        return Ok(v.clone());
    }
    if target.iter().zip(&shape).any(|(t, s)| t < s) {
        return Err(KspaceError::InvalidParameter(format!(
            "mean_pad_to_shape cannot shrink {shape:?} to {target:?}"
        )));
    }
    let fill = v.mean() as f32;
    let [h, w, d] = shape;
    let [th, tw, td] = target;
    let off = [(th - h) / 2, (tw - w) / 2, (td - d) / 2];
    let mut data = vec![fill; th * tw * td];
    for hh in 0..h {
        for ww in 0..w {
            let src = (hh * w + ww) * d;
            let dst = ((hh + off[0]) * tw + (ww + off[1])) * td + off[2];
            data[dst..dst + d].copy_from_slice(&v.data()[src..src + d]);
        }
    }
    Ok(VolumeGrid::new(
        data,
        target,
        v.spacing_mm(),
        v.modality(),
        v.subject_id().to_string(),
    )?)
}

fn mirror_index(idx: [usize; 3], shape: [usize; 3]) -> [usize; 3] {
    [
        (shape[0] - idx[0]) % shape[0],
        (shape[1] - idx[1]) % shape[1],
        (shape[2] - idx[2]) % shape[2],
    ]
}

fn flat(idx: [usize; 3], shape: [usize; 3]) -> usize {
    (idx[0] * shape[1] + idx[1]) * shape[2] + idx[2]
}

/// In-place Hermitian symmetrization s(f) <- (s(f) + conj(s(-f))) / 2.
fn symmetrize(s: &mut [Complex64], shape: [usize; 3]) {
    let [h, w, d] = shape;
    for i0 in 0..h {
        for i1 in 0..w {
            for i2 in 0..d {
                let idx = [i0, i1, i2];
                let mir = mirror_index(idx, shape);
                let a = flat(idx, shape);
                let b = flat(mir, shape);
                if a < b {
                    let avg = (s[a] + s[b].conj()) * 0.5;
                    s[a] = avg;
                    s[b] = avg.conj();
                } else if a == b {
                    s[a] = Complex64::new(s[a].re, 0.0);
                }
            }
        }
    }
}

/// Estimates the transfer function with default options (Hermitian
/// symmetrization on, strict shape matching).
pub fn estimate_transfer(
    pairs: &[(VolumeGrid, VolumeGrid)],
    lambda_reg: f64,
) -> Result<TransferFunction> {
    estimate_transfer_with(pairs, lambda_reg, &TransferOptions::default())
}

/// Estimates the transfer function from (uLF, HF) pairs.
pub fn estimate_transfer_with(
    pairs: &[(VolumeGrid, VolumeGrid)],
    lambda_reg: f64,
    opts: &TransferOptions,
) -> Result<TransferFunction> {
    if pairs.is_empty() {
        return Err(KspaceError::EmptyPairs);
    }
    if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
        return Err(KspaceError::InvalidParameter(format!(
            "lambda must be finite and >= 0, got {lambda_reg}"
        )));
    }

    let shape = if opts.pad_to_common {
        let mut common = [0usize; 3];
        for (u, h) in pairs {
            for a in 0..3 {
                common[a] = common[a].max(u.shape()[a]).max(h.shape()[a]);
            }
        }
        common
    } else {
        let shape = pairs[0].0.shape();
        for (u, h) in pairs {
            for v in [u, h] {
                if v.shape() != shape {
                    return Err(KspaceError::ShapeMismatch {
                        a: shape,
                        b: v.shape(),
                    });
                }
            }
        }
        shape
    };

    let n = shape[0] * shape[1] * shape[2];
    let mut num = vec![Complex64::default(); n];
    let mut den = vec![0.0f64; n];
    for (ulf, hf) in pairs {
        let x = forward_fft(&mean_pad_to_shape(ulf, shape)?);
        let y = forward_fft(&mean_pad_to_shape(hf, shape)?);
        for i in 0..n {
            num[i] += x.data()[i] * y.data()[i].conj();
            den[i] += y.data()[i].norm_sqr();
        }
    }

    let mut s = vec![Complex64::default(); n];
    for i in 0..n {
        let d = den[i] + lambda_reg;
        if d == 0.0 {
            let idx = [
                i / (shape[1] * shape[2]),
                (i / shape[2]) % shape[1],
                i % shape[2],
            ];
            return Err(KspaceError::SingularFrequency { index: idx });
        }
        s[i] = num[i] / d;
    }
    if opts.hermitian {
        symmetrize(&mut s, shape);
    }
    Ok(TransferFunction {
        s,
        shape,
        lambda_reg,
        n_pairs: pairs.len(),
        hermitian_enforced: opts.hermitian,
    })
}

/// Default regularization: `rel` times the frequency-mean of sum_i |Y_i|^2,
/// so the strength tracks the data scale.
pub fn relative_lambda(pairs: &[(VolumeGrid, VolumeGrid)], rel: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(KspaceError::EmptyPairs);
    }
    let mut common = [0usize; 3];
    for (u, h) in pairs {
        for a in 0..3 {
            common[a] = common[a].max(u.shape()[a]).max(h.shape()[a]);
        }
    }
    let n = (common[0] * common[1] * common[2]) as f64;
    let mut total = 0.0f64;
    for (_, hf) in pairs {
        total += forward_fft(&mean_pad_to_shape(hf, common)?).energy();
    }
    Ok(rel * total / n)
}

/// Filters an HF volume through the transfer function: uLF_sim =
/// F^-1(S(f)·Y(f)). Output modality is ULF_SIM.
pub fn apply_transfer(tf: &TransferFunction, hf: &VolumeGrid) -> Result<VolumeGrid> {
    if hf.shape() != tf.shape {
        return Err(KspaceError::ShapeMismatch {
            a: tf.shape,
            b: hf.shape(),
        });
    }
    let mut y = forward_fft(hf);
    for (v, s) in y.data_mut().iter_mut().zip(&tf.s) {
        *v *= s;
    }
    let y = y.with_modality(Modality::UlfSim);
    if tf.hermitian_enforced {
        // A Hermitian filter on a real image must come back real; a large
        // residue here means the filter file is corrupt.
        inverse_fft(&y)
    } else {
        Ok(inverse_fft_lossy(&y)?.0)
    }
}

const TF_MAGIC: &str = "mriqt-transfer 1";

/// Writes the filter: plain-text header, `---` separator, then interleaved
/// float32 little-endian (re, im) pairs in voxel order.
pub fn save_transfer(tf: &TransferFunction, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::UnwritablePath {
                path: path.to_owned(),
                source: e,
            })?;
        }
    }
    let mut bytes = Vec::with_capacity(64 + tf.s.len() * 8);
    let header = format!(
        "{TF_MAGIC}\nshape {} {} {}\nlambda {:e}\nn_pairs {}\nhermitian {}\n---\n",
        tf.shape[0], tf.shape[1], tf.shape[2], tf.lambda_reg, tf.n_pairs, tf.hermitian_enforced
    );
    bytes.extend_from_slice(header.as_bytes());
    for c in &tf.s {
        bytes.extend_from_slice(&(c.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(c.im as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::UnwritablePath {
        path: path.to_owned(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| CoreError::UnwritablePath {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(())
}

pub fn load_transfer(path: impl AsRef<Path>) -> Result<TransferFunction> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CoreError::UnreadableFile {
            path: path.to_owned(),
            source: e,
        })?;
    let corrupt = |reason: &str| CoreError::CorruptHeader {
        path: path.to_owned(),
        reason: reason.to_string(),
    };

    let sep = b"\n---\n";
    let sep_pos = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| corrupt("missing `---` separator"))?;
    let header = std::str::from_utf8(&bytes[..sep_pos]).map_err(|_| corrupt("non-UTF8 header"))?;
    let body = &bytes[sep_pos + sep.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(TF_MAGIC) {
        return Err(corrupt("bad magic").into());
    }
    let mut shape = None;
    let mut lambda = None;
    let mut n_pairs = None;
    let mut hermitian = None;
    for line in lines {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("shape") => {
                let dims: Vec<usize> = it.filter_map(|t| t.parse().ok()).collect();
                if dims.len() != 3 {
                    return Err(corrupt("shape needs three dims").into());
                }
                shape = Some([dims[0], dims[1], dims[2]]);
            }
            Some("lambda") => lambda = it.next().and_then(|t| t.parse::<f64>().ok()),
            Some("n_pairs") => n_pairs = it.next().and_then(|t| t.parse::<usize>().ok()),
            Some("hermitian") => hermitian = it.next().and_then(|t| t.parse::<bool>().ok()),
            Some(other) => return Err(corrupt(&format!("unknown header field `{other}`")).into()),
            None => {}
        }
    }
    let shape = shape.ok_or_else(|| corrupt("missing shape"))?;
    let lambda_reg = lambda.ok_or_else(|| corrupt("missing lambda"))?;
    let n_pairs = n_pairs.ok_or_else(|| corrupt("missing n_pairs"))?;
    let hermitian_enforced = hermitian.ok_or_else(|| corrupt("missing hermitian"))?;

    let n = shape[0] * shape[1] * shape[2];
    if body.len() != n * 8 {
        return Err(corrupt(&format!(
            "body holds {} bytes, shape needs {}",
            body.len(),
            n * 8
        ))
        .into());
    }
    let mut s = Vec::with_capacity(n);
    for ch in body.chunks_exact(8) {
        let re = f32::from_le_bytes(ch[0..4].try_into().unwrap()) as f64;
        let im = f32::from_le_bytes(ch[4..8].try_into().unwrap()) as f64;
        if !(re.is_finite() && im.is_finite()) {
            return Err(CoreError::NonFiniteData { count: 1 }.into());
        }
        s.push(Complex64::new(re, im));
    }
    Ok(TransferFunction {
        s,
        shape,
        lambda_reg,
        n_pairs,
        hermitian_enforced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mriqt_core::rng::seeded_rng;
    use rand::Rng;

    fn random_volume(seed: u64, shape: [usize; 3], modality: Modality) -> VolumeGrid {
        let mut rng = seeded_rng(seed);
        let n = shape[0] * shape[1] * shape[2];
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        VolumeGrid::new(data, shape, [1.0; 3], modality, "sub-test").unwrap()
    }

    fn scaled(v: &VolumeGrid, c: f32) -> VolumeGrid {
        v.clone()
            .with_data(v.data().iter().map(|x| x * c).collect())
            .unwrap()
    }

    #[test]
    fn exact_scaling_recovered_without_regularization() {
        let hf = random_volume(3, [8, 8, 8], Modality::HF);
        let ulf = scaled(&hf, 2.0).with_modality(Modality::UlfReal);
        let tf = estimate_transfer(&[(ulf, hf)], 0.0).unwrap();
        for c in tf.s() {
            assert!((c.re - 2.0).abs() < 1e-9 && c.im.abs() < 1e-9, "{c:?}");
        }
    }

    #[test]
    fn huge_lambda_shrinks_filter_to_zero() {
        let hf = random_volume(4, [8, 8, 8], Modality::HF);
        let ulf = random_volume(5, [8, 8, 8], Modality::UlfReal);
        let tf = estimate_transfer(&[(ulf, hf)], 1e12).unwrap();
        for c in tf.s() {
            assert!(c.norm() < 1e-6);
        }
    }

    #[test]
    fn singular_frequency_detected() {
        // An identically zero HF volume makes every Y_i vanish, so lambda =
        // 0 has no unique minimizer anywhere; the first frequency scanned
        // is reported.
        let hf = random_volume(6, [8, 8, 8], Modality::HF)
            .with_data(vec![0.0; 8 * 8 * 8])
            .unwrap();
        let ulf = random_volume(7, [8, 8, 8], Modality::UlfReal);
        let err = estimate_transfer(&[(ulf.clone(), hf.clone())], 0.0).unwrap_err();
        assert!(
            matches!(err, KspaceError::SingularFrequency { index: [0, 0, 0] }),
            "{err:?}"
        );
        // Any positive lambda heals it.
        assert!(estimate_transfer(&[(ulf, hf)], 1e-6).is_ok());
    }

    #[test]
    fn shape_mismatch_rejected_strict_but_padded_ok() {
        let hf = random_volume(8, [8, 8, 8], Modality::HF);
        let ulf = random_volume(9, [8, 8, 10], Modality::UlfReal);
        assert!(matches!(
            estimate_transfer(&[(ulf.clone(), hf.clone())], 0.1),
            Err(KspaceError::ShapeMismatch { .. })
        ));
        let opts = TransferOptions {
            pad_to_common: true,
            ..Default::default()
        };
        let tf = estimate_transfer_with(&[(ulf, hf)], 0.1, &opts).unwrap();
        assert_eq!(tf.shape(), [8, 8, 10]);
    }

    #[test]
    fn hermitian_symmetry_holds() {
        let pairs: Vec<_> = (0..2)
            .map(|i| {
                (
                    random_volume(20 + i, [8, 6, 10], Modality::UlfReal),
                    random_volume(30 + i, [8, 6, 10], Modality::HF),
                )
            })
            .collect();
        let tf = estimate_transfer(&pairs, 0.05).unwrap();
        let shape = tf.shape();
        for i0 in 0..shape[0] {
            for i1 in 0..shape[1] {
                for i2 in 0..shape[2] {
                    let a = tf.s()[flat([i0, i1, i2], shape)];
                    let b = tf.s()[flat(mirror_index([i0, i1, i2], shape), shape)];
                    assert!((a - b.conj()).norm() <= 1e-6, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn regularized_filter_is_bounded() {
        // |S(f)| = |sum X conj(Y)| / (sum |Y|^2 + lambda)
        //        <= sum |X||Y| / (sum |Y|^2 + lambda)
        // and each |Y| / (|Y|^2 + lambda) <= 1 / (2 sqrt(lambda)), so
        // |S(f)| <= n_pairs * max_i |X_i(f)| / (2 sqrt(lambda)).
        for (seed, lambda) in [(40u64, 0.01f64), (41, 1.0), (42, 25.0)] {
            let pairs: Vec<_> = (0..3)
                .map(|i| {
                    (
                        random_volume(seed + 10 * i, [8, 8, 8], Modality::UlfReal),
                        random_volume(seed + 10 * i + 5, [8, 8, 8], Modality::HF),
                    )
                })
                .collect();
            let opts = TransferOptions {
                hermitian: false,
                ..Default::default()
            };
            let tf = estimate_transfer_with(&pairs, lambda, &opts).unwrap();
            let spectra: Vec<_> = pairs.iter().map(|(u, _)| forward_fft(u)).collect();
            let n = 8 * 8 * 8;
            for i in 0..n {
                let max_x = spectra
                    .iter()
                    .map(|s| s.data()[i].norm())
                    .fold(0.0f64, f64::max);
                let bound = pairs.len() as f64 * max_x / (2.0 * lambda.sqrt());
                assert!(
                    tf.s()[i].norm() <= bound * (1.0 + 1e-12),
                    "|S|={} bound={} lambda={}",
                    tf.s()[i].norm(),
                    bound,
                    lambda
                );
            }
        }
    }

    #[test]
    fn identity_and_zero_filters() {
        let hf = random_volume(50, [8, 8, 8], Modality::HF);
        // S = 1: estimate from a pair where uLF == HF.
        let tf = estimate_transfer(&[(hf.clone().with_modality(Modality::UlfReal), hf.clone())], 0.0)
            .unwrap();
        let out = apply_transfer(&tf, &hf).unwrap();
        assert_eq!(out.modality(), Modality::UlfSim);
        for (a, b) in out.data().iter().zip(hf.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
        // S = 0 via huge lambda.
        let tf0 = estimate_transfer(&[(hf.clone().with_modality(Modality::UlfReal), hf.clone())], 1e15)
            .unwrap();
        let out0 = apply_transfer(&tf0, &hf).unwrap();
        for a in out0.data() {
            assert!(a.abs() <= 1e-6);
        }
    }

    #[test]
    fn apply_rejects_shape_mismatch() {
        let hf = random_volume(60, [8, 8, 8], Modality::HF);
        let tf = estimate_transfer(&[(hf.clone().with_modality(Modality::UlfReal), hf)], 0.1).unwrap();
        let other = random_volume(61, [10, 8, 8], Modality::HF);
        assert!(matches!(
            apply_transfer(&tf, &other),
            Err(KspaceError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let hf = random_volume(70, [6, 8, 10], Modality::HF);
        let ulf = random_volume(71, [6, 8, 10], Modality::UlfReal);
        let tf = estimate_transfer(&[(ulf, hf)], 0.25).unwrap();
        let p = dir.path().join("filter.tf");
        save_transfer(&tf, &p).unwrap();
        let back = load_transfer(&p).unwrap();
        assert_eq!(back.shape(), tf.shape());
        assert_eq!(back.lambda_reg(), tf.lambda_reg());
        assert_eq!(back.n_pairs(), 1);
        assert!(back.hermitian_enforced());
        for (a, b) in back.s().iter().zip(tf.s()) {
            // Storage is float32; one cast of slack.
            assert_eq!(a.re, b.re as f32 as f64);
            assert_eq!(a.im, b.im as f32 as f64);
        }
        // Corrupt the magic line and expect a header error.
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(load_transfer(&p).is_err());
    }

    #[test]
    fn mean_padding_centers_content() {
        // First half 0, second half 4 -> mean 2 fills the border.
        let mut data = vec![0.0f32; 4 * 4 * 4];
        for x in data.iter_mut().skip(32) {
            *x = 4.0;
        }
        let v = VolumeGrid::new(data, [4, 4, 4], [1.0; 3], Modality::HF, "s").unwrap();
        let p = mean_pad_to_shape(&v, [8, 4, 4]).unwrap();
        assert_eq!(p.shape(), [8, 4, 4]);
        assert_eq!(p.at(0, 0, 0), 2.0); // pad rows get the mean
        assert_eq!(p.at(1, 3, 3), 2.0);
        assert_eq!(p.at(2, 0, 0), 0.0); // source starts at offset 2
        assert_eq!(p.at(5, 0, 0), 4.0);
        assert_eq!(p.at(6, 0, 0), 2.0);
        assert!(mean_pad_to_shape(&v, [2, 4, 4]).is_err());
    }
}
