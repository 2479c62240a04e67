//! Volumetric perceptual distance and start-step selection.
//!
//! The distance is LPIPS-style: extractor features are unit-normalized
//! across channels at every voxel, squared differences are averaged over
//! space, and stages are averaged uniformly (no learned calibration). The
//! start-step search noises a uLF/HF pair with a *shared* ε and finds the
//! smallest step at which the two become perceptually indistinguishable —
//! the step where reverse sampling can begin from the noised condition
//! instead of pure noise.

use crate::error::{PerceptualError, Result};
use crate::extractor::FeatureExtractor;
use mriqt_core::VolumeGrid;
use mriqt_diffusion::{noise_like, q_sample, NoiseSchedule};
use mriqt_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NORM_EPS: f64 = 1e-10;

/// Unit-normalizes each channel vector (per voxel) of a [1, C, S...] map,
/// then accumulates mean squared distance over voxels and channels.
fn stage_distance(a: &Tensor, b: &Tensor) -> f64 {
    let c = a.shape()[1];
    let v: usize = a.shape()[2..].iter().product();
    let (ad, bd) = (a.data(), b.data());
    let mut acc = 0.0;
    for s in 0..v {
        let mut na = 0.0;
        let mut nb = 0.0;
        for ch in 0..c {
            let x = ad[ch * v + s];
            let y = bd[ch * v + s];
            na += x * x;
            nb += y * y;
        }
        let (na, nb) = (na.sqrt() + NORM_EPS, nb.sqrt() + NORM_EPS);
        for ch in 0..c {
            let d = ad[ch * v + s] / na - bd[ch * v + s] / nb;
            acc += d * d;
        }
    }
    acc / v as f64
}

/// LPIPS-3D: nonnegative, symmetric, zero on identical inputs. Not a true
/// metric — the triangle inequality is not guaranteed.
pub fn perceptual_distance(
    fe: &FeatureExtractor,
    a: &VolumeGrid,
    b: &VolumeGrid,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(PerceptualError::ShapeMismatch {
            a: a.shape(),
            b: b.shape(),
        });
    }
    let fa = fe.extract_features(a)?;
    let fb = fe.extract_features(b)?;
    let sum: f64 = fa.iter().zip(&fb).map(|(x, y)| stage_distance(x, y)).sum();
    Ok(sum / fa.len() as f64)
}

/// Outcome of the start-step search.
#[derive(Debug, Clone)]
pub struct SelectKResult {
    /// Chosen start step: smallest t with mean distance ≤ tau (T if never).
    pub k: usize,
    /// Threshold actually used (resolved from the default when not given).
    pub tau: f64,
    /// Mean perceptual distance at every step; `curve[t-1]` is step t.
    pub curve: Vec<f64>,
    /// False when no step reached tau and k fell back to T.
    pub reached: bool,
}

/// Sweeps t = 1..=T, noising each (uLF, HF) pair with a shared per-pair ε,
/// and picks the smallest step whose mean distance drops to `tau`.
/// `tau = None` resolves to 0.05 × the step-1 distance — "converged to
/// within 5% of the clean-image gap".
pub fn select_k(
    fe: &FeatureExtractor,
    pairs: &[(VolumeGrid, VolumeGrid)],
    sch: &NoiseSchedule,
    tau: Option<f64>,
    seed: u64,
) -> Result<SelectKResult> {
    if pairs.is_empty() {
        return Err(PerceptualError::EmptyPairs);
    }
    for (ulf, hf) in pairs {
        if ulf.shape() != hf.shape() {
            return Err(PerceptualError::ShapeMismatch {
                a: ulf.shape(),
                b: hf.shape(),
            });
        }
        fe.check_shape(ulf.shape())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<VolumeGrid> = pairs.iter().map(|(u, _)| noise_like(u, &mut rng)).collect();

    let t_max = sch.steps();
    let mut curve = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let mut acc = 0.0;
        for ((ulf, hf), e) in pairs.iter().zip(&eps) {
            let nu = q_sample(ulf, t, e, sch)?;
            let nh = q_sample(hf, t, e, sch)?;
            acc += perceptual_distance(fe, &nu, &nh)?;
        }
        curve.push(acc / pairs.len() as f64);
    }

    let tau = tau.unwrap_or(0.05 * curve[0]);
    let k = curve.iter().position(|&d| d <= tau);
    Ok(SelectKResult {
        k: k.map_or(t_max, |i| i + 1),
        tau,
        curve,
        reached: k.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExtractorConfig;
    use mriqt_core::Modality;
    use mriqt_diffusion::{make_schedule, ScheduleKind};
    use rand::Rng;

    fn fe() -> FeatureExtractor {
        FeatureExtractor::new(
            ExtractorConfig {
                channels: vec![2, 3, 4],
                in_channels: 1,
            },
            1,
        )
        .unwrap()
    }

    /// Smooth blob with structure, mimicking normalized anatomy.
    fn blob(shift: f32, sharp: f32) -> VolumeGrid {
        let n = 16;
        let mut data = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let r2 = [(i, 0.4f32), (j, 0.5), (k, 0.6)]
                        .iter()
                        .map(|&(q, c)| {
                            let x = (q as f32 + 0.5) / n as f32 - c + shift;
                            x * x
                        })
                        .sum::<f32>();
                    data.push((1.0 - sharp * r2).tanh());
                }
            }
        }
        VolumeGrid::new(data, [n, n, n], [1.0; 3], Modality::HF, "blob").unwrap()
    }

    fn noisy(v: &VolumeGrid, sigma: f32, seed: u64) -> VolumeGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = v
            .data()
            .iter()
            .map(|&x| x + sigma * rng.gen_range(-1.0..1.0f32))
            .collect();
        v.with_data(data).unwrap()
    }

    #[test]
    fn distance_is_zero_on_identity_and_symmetric() {
        let e = fe();
        let a = blob(0.0, 8.0);
        let b = blob(0.1, 6.0);
        assert_eq!(perceptual_distance(&e, &a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&e, &a, &b).unwrap();
        let ba = perceptual_distance(&e, &b, &a).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn distance_grows_with_noise_amplitude() {
        let e = fe();
        let clean = blob(0.0, 8.0);
        let mut prev = 0.0;
        for sigma in [0.05f32, 0.1, 0.2, 0.3] {
            let d = perceptual_distance(&e, &clean, &noisy(&clean, sigma, 7)).unwrap();
            assert!(
                d > prev,
                "distance not increasing at sigma {sigma}: {d} <= {prev}"
            );
            prev = d;
        }
    }

    #[test]
    fn identical_pairs_select_step_one() {
        let e = fe();
        let sch = make_schedule(ScheduleKind::Linear, 10).unwrap();
        let v = blob(0.0, 8.0);
        let r = select_k(&e, &[(v.clone(), v)], &sch, None, 3).unwrap();
        assert_eq!(r.k, 1);
        assert!(r.reached);
        assert!(r.curve.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn unreachable_tau_falls_back_to_t_with_flag() {
        let e = fe();
        let sch = make_schedule(ScheduleKind::Linear, 8).unwrap();
        let pairs = vec![(blob(0.0, 8.0), blob(0.15, 5.0))];
        let r = select_k(&e, &pairs, &sch, Some(0.0), 4).unwrap();
        assert_eq!(r.k, 8);
        assert!(!r.reached);
        assert_eq!(r.curve.len(), 8);
    }

    #[test]
    fn tighter_tau_never_selects_an_earlier_step() {
        let e = fe();
        let sch = make_schedule(ScheduleKind::Cosine, 12).unwrap();
        let pairs = vec![
            (blob(0.0, 8.0), blob(0.1, 6.0)),
            (noisy(&blob(0.05, 7.0), 0.1, 5), blob(0.05, 7.0)),
        ];
        let loose = select_k(&e, &pairs, &sch, None, 6).unwrap();
        let tight = select_k(&e, &pairs, &sch, Some(loose.tau * 0.2), 6).unwrap();
        assert!(tight.k >= loose.k, "tight {} < loose {}", tight.k, loose.k);
        // Same seed → identical curves regardless of tau.
        assert_eq!(loose.curve, tight.curve);
    }

    #[test]
    fn empty_pairs_are_rejected() {
        let e = fe();
        let sch = make_schedule(ScheduleKind::Linear, 5).unwrap();
        assert!(matches!(
            select_k(&e, &[], &sch, None, 1),
            Err(PerceptualError::EmptyPairs)
        ));
    }
}
