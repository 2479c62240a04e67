//! Image-to-image sampling: forward-noise the condition to step K, then
//! walk the reverse chain with classifier-free guidance. Batch mode fans
//! out over a manifest's uLF volumes with per-volume seeds and timing.

use crate::config::{PredictionKind, SamplerConfig};
use crate::error::Result;
use mriqt_core::io::{load_volume, save_volume};
use mriqt_core::preprocess::{denormalize_unit, normalize_unit};
use mriqt_core::rng::seeded_rng;
use mriqt_core::{DatasetManifest, Modality, VolumeGrid};
use mriqt_denoiser::Denoiser;
use mriqt_diffusion::{ddpm_step, noise_like, q_sample, v_from_eps, GuidanceConfig, NoiseSchedule};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// The model surface the sampler needs: one guided prediction per step.
/// Implemented by [`Denoiser`]; test harnesses substitute analytic models.
pub trait GuidedPredictor {
    fn guided_predict(
        &self,
        x_t: &VolumeGrid,
        cond: &VolumeGrid,
        t: usize,
        guidance: &GuidanceConfig,
    ) -> Result<VolumeGrid>;
}

impl GuidedPredictor for Denoiser {
    fn guided_predict(
        &self,
        x_t: &VolumeGrid,
        cond: &VolumeGrid,
        t: usize,
        guidance: &GuidanceConfig,
    ) -> Result<VolumeGrid> {
        Ok(Denoiser::guided_predict(self, x_t, cond, t, guidance)?)
    }
}

/// Adds two volumes voxelwise (the literal-init test hook).
fn add_volumes(a: &VolumeGrid, b: &VolumeGrid) -> VolumeGrid {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    a.with_data(data).expect("same length")
}

/// Generates one HF-like volume from a raw uLF condition.
///
/// The condition is mapped to [−1, 1] (its original range is recorded),
/// forward-noised to level K with seeded ε, then denoised t = K…1 with one
/// guided prediction and one posterior step each. The result is mapped
/// back through the condition's affine and tagged [`Modality::Generated`].
/// Output intensities are checked against the condition's range ± 10% of
/// its width; violations log a warning but never fail.
pub fn sample(
    model: &impl GuidedPredictor,
    cond: &VolumeGrid,
    sch: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<VolumeGrid> {
    cfg.validate(sch.steps())?;
    let (lo, hi) = cond.min_max();
    let c = normalize_unit(cond)?;
    let mut rng = seeded_rng(cfg.seed);
    let eps = noise_like(&c, &mut rng);
    let k = cfg.k_start;
    let mut x = if cfg.literal_init {
        add_volumes(&c, &eps)
    } else {
        q_sample(&c, k, &eps, sch)?
    };
    for t in (1..=k).rev() {
        let y = model.guided_predict(&x, &c, t, &cfg.guidance)?;
        let v = match cfg.prediction {
            PredictionKind::V => y,
            PredictionKind::Eps => v_from_eps(&x, &y, t, sch)?,
        };
        x = ddpm_step(&x, &v, t, sch, &mut rng, cfg.deterministic_tail)?;
    }
    let out = denormalize_unit(&x, lo, hi)?;
    let (out_lo, out_hi) = out.min_max();
    let margin = 0.1 * (hi - lo);
    if out_lo < lo - margin || out_hi > hi + margin {
        log::warn!(
            "generated range [{out_lo}, {out_hi}] escapes condition range [{lo}, {hi}] ± 10%"
        );
    }
    Ok(out.with_modality(Modality::Generated))
}

/// One volume the batch run could not produce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleFailure {
    pub subject_id: String,
    pub input: PathBuf,
    pub error: String,
}

/// Index of the generated volumes, written as `generated.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedEntry {
    pub subject_id: String,
    /// Path relative to the output directory.
    pub path: PathBuf,
}

/// What a batch run produced: outputs in manifest order, failures (also
/// persisted to `failures.json` when nonempty), and the timing CSV path.
#[derive(Debug)]
pub struct BatchOutcome {
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<SampleFailure>,
    pub timing_csv: PathBuf,
}

struct VolumeResult {
    subject_id: String,
    outcome: std::result::Result<(PathBuf, f64, usize), SampleFailure>,
}

/// Runs [`sample`] over every uLF volume of a manifest (paired entries
/// first, then uLF-only), writing `<subject>_gen.rvol` files plus
/// `generated.json` and `timing.csv` into `out_dir`.
///
/// Volume i uses seed `cfg.seed + i`, so results are independent of the
/// worker count and a rerun is byte-identical except for timings. A
/// volume that fails to load, sample, or save becomes a failure record
/// (persisted to `failures.json`) without stopping the rest.
pub fn batch_sample(
    model: &(impl GuidedPredictor + Sync),
    manifest_path: &Path,
    sch: &NoiseSchedule,
    cfg: &SamplerConfig,
    out_dir: &Path,
) -> Result<BatchOutcome> {
    cfg.validate(sch.steps())?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let inputs: Vec<(String, PathBuf)> = manifest
        .paired
        .iter()
        .map(|e| (e.subject_id.clone(), base.join(&e.ulf)))
        .chain(
            manifest
                .ulf_only
                .iter()
                .map(|e| (e.subject_id.clone(), base.join(&e.path))),
        )
        .collect();
    std::fs::create_dir_all(out_dir)?;

    let run_one = |index: usize, subject_id: &str, input: &Path| -> VolumeResult {
        let fail = |error: String| VolumeResult {
            subject_id: subject_id.to_string(),
            outcome: Err(SampleFailure {
                subject_id: subject_id.to_string(),
                input: input.to_owned(),
                error,
            }),
        };
        let cond = match load_volume(input) {
            Ok(v) => v,
            Err(e) => return fail(e.to_string()),
        };
        let per_volume = SamplerConfig {
            seed: cfg.seed.wrapping_add(index as u64),
            ..cfg.clone()
        };
        let started = Instant::now();
        let gen = match sample(model, &cond, sch, &per_volume) {
            Ok(v) => v,
            Err(e) => return fail(e.to_string()),
        };
        let seconds = started.elapsed().as_secs_f64();
        let rel = PathBuf::from(format!("{subject_id}_gen.rvol"));
        let gen = gen.with_subject_id(subject_id);
        if let Err(e) = save_volume(&gen, out_dir.join(&rel)) {
            return fail(e.to_string());
        }
        VolumeResult {
            subject_id: subject_id.to_string(),
            outcome: Ok((rel, seconds, gen.num_voxels())),
        }
    };

    // Fan out across threads; every per-volume result is a pure function
    // of (weights, input, seed), so striding cannot change the bytes.
    let mut results: Vec<Option<VolumeResult>> = (0..inputs.len()).map(|_| None).collect();
    if !inputs.is_empty() {
        let workers = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(inputs.len());
        let chunks: Vec<Vec<(usize, VolumeResult)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let inputs = &inputs;
                    let run_one = &run_one;
                    scope.spawn(move || {
                        (w..inputs.len())
                            .step_by(workers)
                            .map(|i| (i, run_one(i, &inputs[i].0, &inputs[i].1)))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sampling worker panicked"))
                .collect()
        });
        for chunk in chunks {
            for (i, r) in chunk {
                results[i] = Some(r);
            }
        }
    }

    let timing_csv = out_dir.join("timing.csv");
    let mut tw = std::io::BufWriter::new(std::fs::File::create(&timing_csv)?);
    writeln!(tw, "subject_id,k,seconds,voxels")?;
    let mut outputs = Vec::new();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for r in results.into_iter().map(|r| r.expect("worker filled slot")) {
        match r.outcome {
            Ok((rel, seconds, voxels)) => {
                writeln!(tw, "{},{},{seconds:.3},{voxels}", r.subject_id, cfg.k_start)?;
                entries.push(GeneratedEntry {
                    subject_id: r.subject_id,
                    path: rel.clone(),
                });
                outputs.push(out_dir.join(rel));
            }
            Err(f) => failures.push(f),
        }
    }
    tw.flush()?;
    std::fs::write(
        out_dir.join("generated.json"),
        serde_json::to_string_pretty(&entries).expect("entries serialize"),
    )?;
    if !failures.is_empty() {
        std::fs::write(
            out_dir.join("failures.json"),
            serde_json::to_string_pretty(&failures).expect("failures serialize"),
        )?;
    }
    Ok(BatchOutcome {
        outputs,
        failures,
        timing_csv,
    })
}
