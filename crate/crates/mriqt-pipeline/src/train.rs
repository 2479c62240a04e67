//! The training loop: warmup-then-cosine learning rate, per-step seeded
//! batch assembly, one backward/optimizer update per step, CSV logging,
//! and checkpoints that resume bit-exactly.

use crate::config::TrainConfig;
use crate::error::{PipelineError, Result};
use crate::objective::objective_graph;
use mriqt_core::preprocess::normalize_unit;
use mriqt_core::rng::{mix_seed, seeded_rng};
use mriqt_core::{DatasetManifest, VolumeGrid};
use mriqt_denoiser::{apply_cond_dropout, ConditionBatch, Denoiser, DenoiserConfig};
use mriqt_diffusion::{make_schedule, noise_like, q_sample, NoiseSchedule};
use mriqt_nn::{load_checkpoint, peek_config, save_checkpoint, AdamW, AdamWConfig, Graph};
use mriqt_perceptual::{FeatureExtractor, PerceptualConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Learning rate at `step` (0-based): linear ramp 0 → peak over
/// `warmup_steps`, then cosine decay peak → 0 ending at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.steps {
        return Err(PipelineError::StepOutOfRange {
            step,
            lo: 0,
            hi: cfg.steps.saturating_sub(1),
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    // Degenerate single-point decay domain keeps the warmup endpoint peak.
    let span = (cfg.steps - 1 - cfg.warmup_steps).max(1) as f64;
    let phase = (step - cfg.warmup_steps) as f64 / span;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos()))
}

/// One training example with both volumes affine-mapped to [−1, 1], the
/// intensity range the diffusion process and the x̂₀ clipping assume.
#[derive(Debug, Clone)]
pub struct TrainPair {
    hf: VolumeGrid,
    cond: VolumeGrid,
}

impl TrainPair {
    /// Normalizes a raw (HF, uLF) pair; the shapes must match.
    pub fn from_raw(hf: &VolumeGrid, ulf: &VolumeGrid) -> Result<Self> {
        if !hf.same_shape(ulf) {
            return Err(PipelineError::ConfigInvalid(format!(
                "pair {} shapes differ: {:?} vs {:?}",
                hf.subject_id(),
                hf.shape(),
                ulf.shape()
            )));
        }
        Ok(Self {
            hf: normalize_unit(hf)?,
            cond: normalize_unit(ulf)?,
        })
    }

    pub fn hf(&self) -> &VolumeGrid {
        &self.hf
    }

    pub fn cond(&self) -> &VolumeGrid {
        &self.cond
    }
}

/// Loads and normalizes every paired entry of a manifest, resolving paths
/// against the manifest's directory.
pub fn load_training_pairs(manifest_path: &Path) -> Result<Vec<TrainPair>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (ulf, hf, _) in manifest.load_pairs(base)? {
        pairs.push(TrainPair::from_raw(&hf, &ulf)?);
    }
    Ok(pairs)
}

/// Everything logged about one optimizer step. `total` equals
/// `v_mse + perceptual` exactly; `perceptual` carries the λ_p·w_SNR(t)
/// factor and is 0 when the term is disabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub v_mse: f64,
    pub perceptual: f64,
    pub total: f64,
    pub seconds: f64,
}

/// Appends training steps to a CSV file. Every column except `wallclock`
/// is a deterministic function of (seed, config, data), which is what the
/// rerun-reproducibility check relies on.
pub struct TrainLogWriter {
    w: std::io::BufWriter<std::fs::File>,
}

impl TrainLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,lr,mse,perceptual,total,wallclock")?;
        Ok(Self { w })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(
            self.w,
            "{},{},{},{},{},{:.3}",
            r.step, r.lr, r.v_mse, r.perceptual, r.total, r.seconds
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Checkpoint header contents. The model config is flattened to the top
/// level so the same header parses as a bare [`DenoiserConfig`], letting
/// `Denoiser::load` open trainer checkpoints directly.
#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    #[serde(flatten)]
    model: DenoiserConfig,
    trainer: TrainConfig,
    completed_steps: u64,
}

/// Owns the model, optimizer, schedule, and step counter. Each step is
/// seeded from (config seed, step index) alone, so a run is a pure
/// function of its inputs and resuming from a checkpoint replays the
/// remaining steps bit-exactly.
pub struct Trainer {
    model: Denoiser,
    extractor: Option<FeatureExtractor>,
    opt: AdamW,
    sch: NoiseSchedule,
    cfg: TrainConfig,
    pcfg: PerceptualConfig,
    next_step: u64,
}

impl Trainer {
    /// An extractor is required exactly when `lambda_p > 0`; its stage
    /// count sets the perceptual layer-weight vector (all ones).
    pub fn new(
        model: Denoiser,
        extractor: Option<FeatureExtractor>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.lambda_p > 0.0 && extractor.is_none() {
            return Err(PipelineError::ConfigInvalid(
                "lambda_p > 0 requires a feature extractor".into(),
            ));
        }
        let sch = make_schedule(cfg.schedule, cfg.t_steps)?;
        let n_stages = extractor.as_ref().map_or(0, |fe| fe.n_stages());
        let pcfg = PerceptualConfig {
            layer_weights: vec![1.0; n_stages.max(1)],
            lambda_p: cfg.lambda_p,
            ..Default::default()
        };
        let opt = AdamW::new(
            model.store(),
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        );
        Ok(Self {
            model,
            extractor,
            opt,
            sch,
            cfg,
            pcfg,
            next_step: 0,
        })
    }

    /// Rebuilds a trainer mid-run from a checkpoint written by
    /// [`Trainer::save_checkpoint`]: model weights, optimizer moments, and
    /// the step counter all restore, so continuing reproduces an
    /// uninterrupted run bit for bit.
    pub fn resume(path: &Path, extractor: Option<FeatureExtractor>) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_str(&peek_config(path)?)
            .map_err(|e| PipelineError::ConfigInvalid(format!("checkpoint header: {e}")))?;
        let model = Denoiser::new(meta.model, 0)?;
        let mut trainer = Self::new(model, extractor, meta.trainer)?;
        let info = load_checkpoint(path, trainer.model.store_mut(), Some(&mut trainer.opt))?;
        if info.adam_step != Some(meta.completed_steps) {
            return Err(PipelineError::ConfigInvalid(format!(
                "checkpoint step mismatch: optimizer {:?} vs header {}",
                info.adam_step, meta.completed_steps
            )));
        }
        trainer.next_step = meta.completed_steps;
        Ok(trainer)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let meta = TrainerMeta {
            model: self.model.config().clone(),
            trainer: self.cfg.clone(),
            completed_steps: self.next_step,
        };
        let json = serde_json::to_string(&meta)
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        save_checkpoint(path, self.model.store(), &json, Some(&self.opt))?;
        Ok(())
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sch
    }

    /// Optimizer updates completed so far; also the next step's index.
    pub fn completed_steps(&self) -> u64 {
        self.next_step
    }

    /// One optimizer update. Draws, in order and from a fresh stream
    /// seeded by (seed, step): batch indices, per-sample steps t, the
    /// noise ε per sample, then the condition-dropout mask.
    pub fn train_step(&mut self, pairs: &[TrainPair]) -> Result<StepRecord> {
        if pairs.is_empty() {
            return Err(PipelineError::EmptyTrainingSet);
        }
        let step = self.next_step;
        let lr = lr_at(step as usize, &self.cfg)?;
        let started = Instant::now();
        let mut rng = seeded_rng(mix_seed(self.cfg.seed, step));

        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| rng.gen_range(0..pairs.len()))
            .collect();
        let ts: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| rng.gen_range(1..=self.cfg.t_steps))
            .collect();
        let mut x0s = Vec::with_capacity(idx.len());
        let mut epss = Vec::with_capacity(idx.len());
        let mut xts = Vec::with_capacity(idx.len());
        let mut conds = Vec::with_capacity(idx.len());
        for (&i, &t) in idx.iter().zip(&ts) {
            let x0 = pairs[i].hf.clone();
            let eps = noise_like(&x0, &mut rng);
            xts.push(q_sample(&x0, t, &eps, &self.sch)?);
            conds.push(pairs[i].cond.clone());
            x0s.push(x0);
            epss.push(eps);
        }
        let batch = ConditionBatch::conditional(xts, conds, ts)?;
        let batch = apply_cond_dropout(batch, self.cfg.cond_drop_prob, &mut rng)?;

        let mut g = Graph::new(true);
        let nodes = objective_graph(
            &mut g,
            &self.model,
            self.extractor.as_ref(),
            &batch,
            &x0s,
            &epss,
            &self.sch,
            self.cfg.prediction,
            &self.pcfg,
        )?;
        g.backward(nodes.total, self.model.store_mut(), &[]);
        self.opt.step(self.model.store_mut(), lr);
        self.model.store_mut().zero_grads();
        self.next_step += 1;

        let v_mse = g.value(nodes.v_mse).data()[0];
        let perceptual = nodes
            .perceptual
            .map_or(0.0, |n| g.value(n).data()[0]);
        Ok(StepRecord {
            step,
            lr,
            v_mse,
            perceptual,
            total: g.value(nodes.total).data()[0],
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs from the current step to the configured budget, invoking
    /// `on_step` after each update. With a checkpoint directory, writes
    /// `checkpoint_NNNNNN.ckpt` every `checkpoint_every` completed steps
    /// and `checkpoint_final.ckpt` at the end.
    pub fn run(
        &mut self,
        pairs: &[TrainPair],
        ckpt_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        while self.next_step < self.cfg.steps as u64 {
            let rec = self.train_step(pairs)?;
            if let Some(dir) = ckpt_dir {
                let done = self.next_step;
                if self.cfg.checkpoint_every > 0
                    && done % self.cfg.checkpoint_every as u64 == 0
                    && done < self.cfg.steps as u64
                {
                    self.save_checkpoint(&dir.join(format!("checkpoint_{done:06}.ckpt")))?;
                }
            }
            on_step(&rec);
        }
        if let Some(dir) = ckpt_dir {
            self.save_checkpoint(&dir.join("checkpoint_final.ckpt"))?;
        }
        Ok(())
    }
}
