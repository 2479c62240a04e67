//! Noise schedules: per-step β, α = 1−β, and cumulative ᾱ.
//!
//! Steps are 1-indexed (t ∈ 1..=T) to match the usual diffusion notation;
//! the backing arrays are 0-indexed, so β_t lives at `betas[t-1]`.

use crate::error::{DiffusionError, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[serde(rename = "LINEAR")]
    Linear,
    #[serde(rename = "COSINE")]
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "LINEAR",
            ScheduleKind::Cosine => "COSINE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "LINEAR" => Some(ScheduleKind::Linear),
            "COSINE" => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.steps() {
            Ok(())
        } else {
            Err(DiffusionError::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with the convention ᾱ_0 = 1 for the posterior at t = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(DiffusionError::InvalidT(betas.len()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let sch = Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        };
        sch.validate()?;
        Ok(sch)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DiffusionError::MalformedSchedule(msg));
        for (i, &b) in self.betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("beta[{i}] = {b} outside (0,1)"));
            }
        }
        let mut prev = 1.0f64;
        for (i, &ab) in self.alpha_bars.iter().enumerate() {
            if !(ab > 0.0 && ab < 1.0) {
                return bad(format!("alpha_bar[{i}] = {ab} outside (0,1)"));
            }
            if ab >= prev {
                return bad(format!("alpha_bar not strictly decreasing at {i}"));
            }
            prev = ab;
        }
        Ok(())
    }
}

/// Builds a schedule of `t_steps` steps. LINEAR spaces β from 1e-4 to 0.02;
/// COSINE uses the squared-cosine ᾱ profile with β clipped at 0.999 and ᾱ
/// recomputed from the clipped β so the cumulative-product invariant holds
/// exactly.
pub fn make_schedule(kind: ScheduleKind, t_steps: usize) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(DiffusionError::InvalidT(t_steps));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_steps)
            .map(|i| {
                LINEAR_BETA_START
                    + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (t_steps - 1) as f64
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / t_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                    * std::f64::consts::FRAC_PI_2;
                x.cos() * x.cos()
            };
            let f0 = f(0.0);
            let mut prev_ab = 1.0f64;
            (1..=t_steps)
                .map(|t| {
                    let ab = f(t as f64) / f0;
                    let beta = (1.0 - ab / prev_ab).min(COSINE_BETA_MAX);
                    prev_ab = ab;
                    beta
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, betas)
}

/// Plain-text dump: a header line, then one β per line in shortest
/// round-trip notation, so re-loading reproduces the schedule bit-exactly.
pub fn save_schedule(sch: &NoiseSchedule, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "mriqt-schedule 1").unwrap();
    writeln!(out, "kind {}", sch.kind().as_str()).unwrap();
    writeln!(out, "steps {}", sch.steps()).unwrap();
    for b in sch.betas() {
        writeln!(out, "{b}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_schedule(path: &Path) -> Result<NoiseSchedule> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: &str| DiffusionError::MalformedSchedule(msg.to_string());
    if lines.next() != Some("mriqt-schedule 1") {
        return Err(bad("missing magic line"));
    }
    let kind = lines
        .next()
        .and_then(|l| l.strip_prefix("kind "))
        .and_then(ScheduleKind::parse)
        .ok_or_else(|| bad("missing or unknown kind"))?;
    let steps: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("steps "))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing steps"))?;
    let betas: Vec<f64> = lines
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| bad(&format!("bad beta line {l:?}")))
        })
        .collect::<Result<_>>()?;
    if betas.len() != steps {
        return Err(bad(&format!(
            "expected {steps} betas, found {}",
            betas.len()
        )));
    }
    NoiseSchedule::from_betas(kind, betas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints_match_convention() {
        let sch = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        assert!((sch.beta(1) - 1e-4).abs() < 1e-15);
        assert!((sch.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn two_step_alpha_bar_is_the_product() {
        let sch = make_schedule(ScheduleKind::Linear, 2).unwrap();
        let expected = (1.0 - 1e-4) * (1.0 - 0.02);
        assert!((sch.alpha_bar(2) - expected).abs() < 1e-15);
    }

    #[test]
    fn invariants_hold_for_both_kinds_and_many_lengths() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t_steps in [2usize, 10, 100, 1000] {
                let sch = make_schedule(kind, t_steps).unwrap();
                assert_eq!(sch.steps(), t_steps);
                assert!(sch.alpha_bar(1) < 1.0);
                assert!(sch.alpha_bar(t_steps) > 0.0);
                let mut prod = 1.0;
                for t in 1..=t_steps {
                    let b = sch.beta(t);
                    assert!(b > 0.0 && b < 1.0, "{kind:?} T={t_steps} beta_{t}={b}");
                    prod *= 1.0 - b;
                    assert!(
                        (sch.alpha_bar(t) - prod).abs() < 1e-6,
                        "cumprod drift at t={t}"
                    );
                    assert!(sch.alpha_bar(t) < sch.alpha_bar(t - 1));
                }
            }
        }
    }

    #[test]
    fn cosine_keeps_beta_below_cap() {
        let sch = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        for t in 1..=50 {
            assert!(sch.beta(t) <= COSINE_BETA_MAX + 1e-15);
        }
    }

    #[test]
    fn cosine_ends_noisier_than_it_starts() {
        let sch = make_schedule(ScheduleKind::Cosine, 100).unwrap();
        assert!(sch.alpha_bar(1) > 0.99);
        assert!(sch.alpha_bar(100) < 0.01);
    }

    #[test]
    fn too_short_schedule_is_rejected() {
        assert!(matches!(
            make_schedule(ScheduleKind::Linear, 1),
            Err(DiffusionError::InvalidT(1))
        ));
    }

    #[test]
    fn snr_is_alpha_bar_ratio() {
        let sch = make_schedule(ScheduleKind::Linear, 10).unwrap();
        for t in 1..=10 {
            let ab = sch.alpha_bar(t);
            assert!((sch.snr(t) - ab / (1.0 - ab)).abs() < 1e-15);
        }
    }

    #[test]
    fn dump_and_load_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sch.txt");
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let sch = make_schedule(kind, 200).unwrap();
            save_schedule(&sch, &path).unwrap();
            let back = load_schedule(&path).unwrap();
            assert_eq!(back.kind(), kind);
            assert_eq!(back.betas(), sch.betas());
            for t in 1..=200 {
                assert_eq!(back.alpha_bar(t), sch.alpha_bar(t));
            }
        }
    }

    #[test]
    fn malformed_dumps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sch.txt");
        std::fs::write(&path, "mriqt-schedule 1\nkind COSINE\nsteps 3\n0.1\n0.2\n").unwrap();
        assert!(matches!(
            load_schedule(&path),
            Err(DiffusionError::MalformedSchedule(_))
        ));
        std::fs::write(&path, "wrong\n").unwrap();
        assert!(load_schedule(&path).is_err());
    }
}
