//! High-field phantom synthesis: nested-ellipsoid heads with tissue shells,
//! an optional spherical lesion, and additive scan noise.
//!
//! Everything is a pure function of the spec. The seed drives three draw
//! groups in a fixed order — axis jitter, shell-level jitter, then voxel
//! noise — and the lesion consumes no randomness at all, so a zero-radius
//! lesion reproduces the lesion-free volume bit for bit.

use crate::error::Result;
use crate::spec::{PhantomSpec, BASE_SEMI_AXES, TISSUE_MAX, TISSUE_MIN};
use mriqt_core::rng::seeded_rng;
use mriqt_core::{Modality, VolumeGrid};
use rand::Rng;
use rand_distr::StandardNormal;

/// Relative jitter applied to each head semi-axis.
const AXIS_JITTER: f64 = 0.03;

/// Ceiling on the absolute jitter of each shell level; shrunk when shells
/// are packed tighter so jittered levels can never reorder or collide.
const LEVEL_JITTER_MAX: f64 = 0.03;

/// Tissue intensity for each shell, innermost first, ascending outward.
fn shell_levels(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if n == 1 {
        let mid = 0.5 * (TISSUE_MIN + TISSUE_MAX);
        return vec![mid + rng.gen_range(-LEVEL_JITTER_MAX..=LEVEL_JITTER_MAX)];
    }
    let gap = (TISSUE_MAX - TISSUE_MIN) / (n - 1) as f64;
    let jitter = LEVEL_JITTER_MAX.min(0.25 * gap);
    (0..n)
        .map(|j| {
            TISSUE_MIN + gap * j as f64 + rng.gen_range(-jitter..=jitter)
        })
        .collect()
}

/// Generates one high-field phantom volume from its spec.
///
/// With `noise_sigma = 0` the result is piecewise constant: exactly
/// `n_tissue_shells + 1` distinct values without a lesion (background plus
/// one level per shell), one more with a lesion.
pub fn generate_hf(spec: &PhantomSpec) -> Result<VolumeGrid> {
    spec.validate()?;
    let [sh, sw, sd] = spec.shape;
    let n = spec.n_tissue_shells;
    let mut rng = seeded_rng(spec.seed);

    let axes: Vec<f64> = (0..3)
        .map(|i| {
            BASE_SEMI_AXES[i]
                * spec.shape[i] as f64
                * (1.0 + rng.gen_range(-AXIS_JITTER..=AXIS_JITTER))
        })
        .collect();
    let levels = shell_levels(n, &mut rng);
    let center = [
        (sh as f64 - 1.0) / 2.0,
        (sw as f64 - 1.0) / 2.0,
        (sd as f64 - 1.0) / 2.0,
    ];

    let lesion = spec.lesion.as_ref().filter(|l| l.radius_frac > 0.0);
    let (les_center, les_r2, les_level) = match lesion {
        Some(l) => {
            let a_min = axes.iter().cloned().fold(f64::INFINITY, f64::min);
            let r = l.radius_frac * a_min;
            let c = [
                center[0] + l.center[0] * axes[0],
                center[1] + l.center[1] * axes[1],
                center[2] + l.center[2] * axes[2],
            ];
            (c, r * r, TISSUE_MIN + l.delta)
        }
        None => ([0.0; 3], -1.0, 0.0),
    };

    let mut data = vec![0.0f64; sh * sw * sd];
    let mut idx = 0;
    for h in 0..sh {
        for w in 0..sw {
            for d in 0..sd {
                let dx = [
                    h as f64 - center[0],
                    w as f64 - center[1],
                    d as f64 - center[2],
                ];
                let rho2: f64 = (0..3).map(|i| (dx[i] / axes[i]).powi(2)).sum();
                if rho2 < 1.0 {
                    let shell = ((rho2.sqrt() * n as f64) as usize).min(n - 1);
                    let mut v = levels[shell];
                    if les_r2 >= 0.0 {
                        let dist2 = (h as f64 - les_center[0]).powi(2)
                            + (w as f64 - les_center[1]).powi(2)
                            + (d as f64 - les_center[2]).powi(2);
                        if dist2 <= les_r2 {
                            v = les_level;
                        }
                    }
                    data[idx] = v;
                }
                idx += 1;
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        for v in &mut data {
            let z: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * z;
        }
    }

    let volume = VolumeGrid::new(
        data.iter().map(|&v| v as f32).collect(),
        spec.shape,
        [1.0; 3],
        Modality::HF,
        format!("phantom-{:016x}", spec.seed),
    )?;
    Ok(volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::LesionSpec;

    fn distinct_values(v: &VolumeGrid) -> Vec<f32> {
        let mut vals: Vec<f32> = v.data().to_vec();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        vals
    }

    #[test]
    fn noiseless_volume_is_piecewise_constant() {
        for (shape, shells) in [
            ([16, 16, 16], 3usize),
            ([16, 16, 16], 4),
            ([12, 16, 20], 6),
        ] {
            let spec = PhantomSpec {
                shape,
                n_tissue_shells: shells,
                lesion: None,
                noise_sigma: 0.0,
                seed: 11,
            };
            let v = generate_hf(&spec).unwrap();
            let vals = distinct_values(&v);
            assert_eq!(
                vals.len(),
                shells + 1,
                "expected background + {shells} shell levels, got {vals:?}"
            );
            assert_eq!(vals[0], 0.0, "background level missing");
            assert!(vals[1] >= 0.30 && *vals.last().unwrap() <= 0.89);
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let spec = PhantomSpec {
            noise_sigma: 0.05,
            seed: 77,
            ..PhantomSpec::default()
        };
        let a = generate_hf(&spec).unwrap();
        let b = generate_hf(&spec).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = generate_hf(&PhantomSpec { seed: 78, ..spec }).unwrap();
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn zero_radius_lesion_is_a_no_op() {
        let lesioned = PhantomSpec {
            lesion: Some(LesionSpec {
                center: [0.2, -0.1, 0.1],
                radius_frac: 0.0,
                delta: 0.55,
                class: 3,
            }),
            noise_sigma: 0.02,
            seed: 5,
            ..PhantomSpec::default()
        };
        let plain = PhantomSpec {
            lesion: None,
            ..lesioned.clone()
        };
        let a = generate_hf(&lesioned).unwrap();
        let b = generate_hf(&plain).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn lesion_replaces_tissue_with_its_level() {
        let delta = -0.20;
        let lesioned = PhantomSpec {
            lesion: Some(LesionSpec {
                center: [0.1, 0.05, -0.1],
                radius_frac: 0.3,
                delta,
                class: 0,
            }),
            noise_sigma: 0.0,
            seed: 9,
            ..PhantomSpec::default()
        };
        let plain = PhantomSpec {
            lesion: None,
            ..lesioned.clone()
        };
        let a = generate_hf(&lesioned).unwrap();
        let b = generate_hf(&plain).unwrap();
        let want = (TISSUE_MIN + delta) as f32;
        let mut n_diff = 0usize;
        for (x, y) in a.data().iter().zip(b.data()) {
            if x != y {
                n_diff += 1;
                assert!(
                    (x - want).abs() < 1e-6,
                    "changed voxel {x} is not at the lesion level {want}"
                );
                assert!(*y > 0.3, "lesion overwrote background, not tissue");
            }
        }
        // A 0.3-fraction radius is ~1.8 voxels at this resolution, which
        // covers at least ~25 voxel centers wherever the sphere lands.
        assert!(n_diff >= 20, "lesion footprint too small: {n_diff} voxels");
    }

    #[test]
    fn noise_magnitude_tracks_sigma() {
        let sigma = 0.02;
        let clean = PhantomSpec {
            noise_sigma: 0.0,
            seed: 31,
            ..PhantomSpec::default()
        };
        let noisy = PhantomSpec {
            noise_sigma: sigma,
            ..clean.clone()
        };
        let a = generate_hf(&clean).unwrap();
        let b = generate_hf(&noisy).unwrap();
        let n = a.data().len() as f64;
        let rms = (a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(
            rms > 0.75 * sigma && rms < 1.25 * sigma,
            "noise rms {rms} vs sigma {sigma}"
        );
    }

    #[test]
    fn escaping_lesion_is_rejected() {
        let spec = PhantomSpec {
            lesion: Some(LesionSpec {
                center: [0.9, 0.0, 0.0],
                radius_frac: 0.2,
                delta: 0.55,
                class: 3,
            }),
            ..PhantomSpec::default()
        };
        assert!(generate_hf(&spec).is_err());
    }
}
