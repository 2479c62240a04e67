//! Algebraic identities of the v-parametrization and the deterministic
//! sampling limit, over both schedule kinds and a range of lengths.

use mriqt_core::{Modality, VolumeGrid};
use mriqt_diffusion::{
    cfg_merge, ddpm_step, eps_from_v, make_schedule, noise_like, q_sample, v_from, v_from_eps,
    x0_from_v, NoiseSchedule, ScheduleKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vol(shape: [usize; 3], rng: &mut ChaCha8Rng, scale: f32) -> VolumeGrid {
    let n = shape[0] * shape[1] * shape[2];
    VolumeGrid::new(
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        shape,
        [1.0; 3],
        Modality::HF,
        "rt",
    )
    .unwrap()
}

fn max_abs_diff(a: &VolumeGrid, b: &VolumeGrid) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

fn probe_steps(t_steps: usize) -> Vec<usize> {
    let mut ts = vec![1, t_steps / 4, t_steps / 2, t_steps];
    ts.retain(|&t| t >= 1);
    ts.dedup();
    ts
}

#[test]
fn v_parametrization_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for t_steps in [2usize, 10, 100, 1000] {
            let sch = make_schedule(kind, t_steps).unwrap();
            for t in probe_steps(t_steps) {
                let x0 = rand_vol([8, 8, 8], &mut rng, 1.0);
                let eps = noise_like(&x0, &mut rng);
                let xt = q_sample(&x0, t, &eps, &sch).unwrap();
                let v = v_from(&x0, &eps, t, &sch).unwrap();

                let x0_rec = x0_from_v(&xt, &v, t, &sch).unwrap();
                let d0 = max_abs_diff(&x0_rec, &x0);
                assert!(d0 <= 1e-5, "{kind:?} T={t_steps} t={t}: x0 error {d0:e}");

                let eps_rec = eps_from_v(&xt, &v, t, &sch).unwrap();
                let de = max_abs_diff(&eps_rec, &eps);
                assert!(de <= 1e-5, "{kind:?} T={t_steps} t={t}: eps error {de:e}");
            }
        }
    }
}

#[test]
fn velocity_recovered_from_noise_prediction() {
    // v_from_eps inverts eps_from_v; the 1/√ᾱ factor amplifies f32
    // rounding at the noisiest steps, so probe where ᾱ is not degenerate.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let sch = make_schedule(kind, 100).unwrap();
        for t in [1usize, 25, 50] {
            let x0 = rand_vol([8, 8, 8], &mut rng, 1.0);
            let eps = noise_like(&x0, &mut rng);
            let xt = q_sample(&x0, t, &eps, &sch).unwrap();
            let v = v_from(&x0, &eps, t, &sch).unwrap();
            let eps_hat = eps_from_v(&xt, &v, t, &sch).unwrap();
            let v_rec = v_from_eps(&xt, &eps_hat, t, &sch).unwrap();
            let dv = max_abs_diff(&v_rec, &v);
            let amp = 1.0 / sch.alpha_bar(t).sqrt();
            assert!(
                dv <= 1e-5 * amp.max(1.0),
                "{kind:?} t={t}: v error {dv:e} (amplification {amp:.1})"
            );
        }
    }
}

#[test]
fn guidance_merge_affine_across_random_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = rand_vol([8, 8, 8], &mut rng, 1.0);
    let u = rand_vol([8, 8, 8], &mut rng, 1.0);
    for _ in 0..20 {
        let w1: f64 = rng.gen_range(-1.0..4.0);
        let w2: f64 = rng.gen_range(-1.0..4.0);
        let m1 = cfg_merge(&c, &u, w1).unwrap();
        let m2 = cfg_merge(&c, &u, w2).unwrap();
        let mid = cfg_merge(&c, &u, 0.5 * (w1 + w2)).unwrap();
        for i in 0..c.num_voxels() {
            let lhs = m1.data()[i] as f64 + m2.data()[i] as f64;
            let rhs = 2.0 * mid.data()[i] as f64;
            assert!((lhs - rhs).abs() < 2e-6, "w1={w1} w2={w2} voxel {i}");
        }
    }
}

/// Oracle velocity for the current iterate: the v̂ whose implied clean
/// image is exactly `x0`.
fn oracle_v(x_t: &VolumeGrid, x0: &VolumeGrid, t: usize, sch: &NoiseSchedule) -> VolumeGrid {
    let ab = sch.alpha_bar(t);
    let (sab, somb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&xt, &x0v)| ((sab * xt as f64 - x0v as f64) / somb) as f32)
        .collect();
    x_t.with_data(data).unwrap()
}

#[test]
fn deterministic_oracle_denoising_reaches_x0_from_any_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for t_steps in [2usize, 10, 100] {
            let sch = make_schedule(kind, t_steps).unwrap();
            let x0 = rand_vol([8, 8, 8], &mut rng, 0.95);
            let noise = rand_vol([8, 8, 8], &mut rng, 3.0);
            let zeros = VolumeGrid::zeros([8, 8, 8], Modality::HF, "rt").unwrap();
            for start in [&noise, &zeros, &x0] {
                let mut x = start.clone();
                for t in (1..=t_steps).rev() {
                    let v = oracle_v(&x, &x0, t, &sch);
                    x = ddpm_step(&x, &v, t, &sch, &mut rng, true).unwrap();
                }
                let d = max_abs_diff(&x, &x0);
                assert!(d <= 1e-3, "{kind:?} T={t_steps}: residual {d:e}");
            }
        }
    }
}
