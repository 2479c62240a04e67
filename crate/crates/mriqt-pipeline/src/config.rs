//! Training and sampling configuration, with key-value config-file
//! round-tripping built on [`mriqt_core::config::KvConfig`].

use crate::error::{PipelineError, Result};
use mriqt_core::config::KvConfig;
use mriqt_diffusion::{GuidanceConfig, ScheduleKind};
use serde::{Deserialize, Serialize};

/// What the network output means: the velocity v or the noise ε. The
/// training target, the in-graph clean-image estimate, and the sampler's
/// step conversion all switch on this together, so ablations are pure
/// config changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PredictionKind {
    #[default]
    V,
    Eps,
}

impl PredictionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictionKind::V => "V",
            PredictionKind::Eps => "EPS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "V" => Some(PredictionKind::V),
            "EPS" => Some(PredictionKind::Eps),
            _ => None,
        }
    }
}

/// Optimization recipe: step budget, warmup-then-cosine learning-rate
/// schedule, diffusion noise schedule, objective weights, and guidance
/// dropout. Defaults are desk scale; [`TrainConfig::paper_scale`] restores
/// the published recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer updates to run.
    pub steps: usize,
    /// Alternative step unit: passes over the training pairs. Must be
    /// converted with [`TrainConfig::resolve_epochs`] before training;
    /// kept so the published "epochs" recipe is expressible either way.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Linear LR ramp 0 → peak over this many steps, then cosine to 0.
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Decoupled weight decay passed through to the optimizer.
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Diffusion noise schedule shape.
    pub schedule: ScheduleKind,
    /// Diffusion steps T; training samples t uniformly from [1, T].
    pub t_steps: usize,
    /// Network output parametrization (velocity or noise).
    pub prediction: PredictionKind,
    /// Weight of the SNR-scaled perceptual term; 0 disables it.
    pub lambda_p: f64,
    /// Probability of replacing a sample's condition with the null volume.
    pub cond_drop_prob: f64,
    /// Guidance merge weight recorded for sampling-time defaults.
    pub guidance_weight: f64,
    /// Write a checkpoint every N steps; 0 disables periodic checkpoints
    /// (a final checkpoint is still written when a directory is given).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk scale: thousands of steps on 16³–32³ volumes, T = 200.
    fn default() -> Self {
        Self {
            steps: 3000,
            epochs: None,
            warmup_steps: 150,
            peak_lr: 1e-3,
            weight_decay: 2e-5,
            batch_size: 2,
            schedule: ScheduleKind::Cosine,
            t_steps: 200,
            prediction: PredictionKind::V,
            lambda_p: 0.25,
            cond_drop_prob: 0.1,
            guidance_weight: 2.0,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

/// Config-file keys, in the order [`TrainConfig::to_kv_pairs`] emits them.
const KV_KEYS: &[&str] = &[
    "steps",
    "epochs",
    "warmup_steps",
    "peak_lr",
    "weight_decay",
    "batch_size",
    "schedule",
    "t_steps",
    "prediction",
    "lambda_p",
    "cond_drop_prob",
    "guidance_weight",
    "checkpoint_every",
    "seed",
];

impl TrainConfig {
    /// The published recipe: 30k steps, 1500-step warmup, peak LR 2e-5,
    /// weight decay 2e-5, T = 1000.
    pub fn paper_scale() -> Self {
        Self {
            steps: 30_000,
            warmup_steps: 1500,
            peak_lr: 2e-5,
            weight_decay: 2e-5,
            batch_size: 4,
            t_steps: 1000,
            checkpoint_every: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        if self.epochs.is_some() {
            return bad("epochs must be resolved to steps (resolve_epochs) before use".into());
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return bad(format!(
                "warmup_steps {} must be < steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be finite and > 0", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay {} must be finite and >= 0",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.t_steps < 2 {
            return bad(format!("t_steps {} must be >= 2", self.t_steps));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return bad(format!("lambda_p {} must be finite and >= 0", self.lambda_p));
        }
        self.guidance().validate()?;
        Ok(())
    }

    /// Guidance settings as the diffusion layer expects them.
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            weight: self.guidance_weight,
            cond_drop_prob: self.cond_drop_prob,
        }
    }

    /// Converts an epoch budget into optimizer steps for a training set of
    /// `n_pairs`: epochs × ⌈n_pairs / batch_size⌉. A no-op when `steps` is
    /// already the unit in use.
    pub fn resolve_epochs(&mut self, n_pairs: usize) -> Result<()> {
        if let Some(e) = self.epochs.take() {
            if n_pairs == 0 {
                return Err(PipelineError::EmptyTrainingSet);
            }
            if self.batch_size == 0 {
                return Err(PipelineError::ConfigInvalid(
                    "batch_size must be positive".into(),
                ));
            }
            self.steps = e * n_pairs.div_ceil(self.batch_size);
        }
        Ok(())
    }

    /// Every effective value as config-file pairs, ready for
    /// [`mriqt_core::config::write_resolved_snapshot`].
    pub fn to_kv_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = vec![("steps", self.steps.to_string())];
        if let Some(e) = self.epochs {
            pairs.push(("epochs", e.to_string()));
        }
        pairs.extend([
            ("warmup_steps", self.warmup_steps.to_string()),
            ("peak_lr", format!("{:e}", self.peak_lr)),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            ("batch_size", self.batch_size.to_string()),
            ("schedule", self.schedule.as_str().to_string()),
            ("t_steps", self.t_steps.to_string()),
            ("prediction", self.prediction.as_str().to_string()),
            ("lambda_p", format!("{:e}", self.lambda_p)),
            ("cond_drop_prob", format!("{:e}", self.cond_drop_prob)),
            ("guidance_weight", format!("{:e}", self.guidance_weight)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        pairs
    }

    /// Renders the config in the key-value file grammar; parses back via
    /// [`TrainConfig::from_kv`] to an equal config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv_pairs() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Parses the key-value grammar over [`TrainConfig::default`]: absent
    /// keys keep their defaults; unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_kv_config(&KvConfig::parse(text)?)
    }

    pub fn from_kv_config(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(KV_KEYS)?;
        let mut cfg = Self::default();
        let token = |key: &'static str, value: &str| {
            PipelineError::ConfigInvalid(format!("key `{key}`: unknown value `{value}`"))
        };
        if let Some(v) = kv.get_usize("steps")? {
            cfg.steps = v;
        }
        if let Some(v) = kv.get_usize("epochs")? {
            cfg.epochs = Some(v);
        }
        if let Some(v) = kv.get_usize("warmup_steps")? {
            cfg.warmup_steps = v;
        }
        if let Some(v) = kv.get_f64("peak_lr")? {
            cfg.peak_lr = v;
        }
        if let Some(v) = kv.get_f64("weight_decay")? {
            cfg.weight_decay = v;
        }
        if let Some(v) = kv.get_usize("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = kv.get_str("schedule") {
            cfg.schedule = ScheduleKind::parse(v).ok_or_else(|| token("schedule", v))?;
        }
        if let Some(v) = kv.get_usize("t_steps")? {
            cfg.t_steps = v;
        }
        if let Some(v) = kv.get_str("prediction") {
            cfg.prediction = PredictionKind::parse(v).ok_or_else(|| token("prediction", v))?;
        }
        if let Some(v) = kv.get_f64("lambda_p")? {
            cfg.lambda_p = v;
        }
        if let Some(v) = kv.get_f64("cond_drop_prob")? {
            cfg.cond_drop_prob = v;
        }
        if let Some(v) = kv.get_f64("guidance_weight")? {
            cfg.guidance_weight = v;
        }
        if let Some(v) = kv.get_usize("checkpoint_every")? {
            cfg.checkpoint_every = v;
        }
        if let Some(v) = kv.get_u64("seed")? {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}

/// Sampling controls: where in the chain to start, guidance, seeding, and
/// two test hooks (noise-free reverse steps, literal `c + ε` init).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Start step K; the chain runs t = K, …, 1.
    pub k_start: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Suppress the posterior noise at every reverse step (σ = 0), making
    /// the output a deterministic function of x_K.
    pub deterministic_tail: bool,
    /// Initialize with the literal sum c + ε instead of forward-noising
    /// the condition to level K. Kept for comparison only: the sum's
    /// variance does not match the forward process at t = K.
    pub literal_init: bool,
    /// Must match the parametrization the model was trained with.
    pub prediction: PredictionKind,
}

impl SamplerConfig {
    pub fn new(k_start: usize) -> Self {
        Self {
            k_start,
            guidance: GuidanceConfig::default(),
            seed: 0,
            deterministic_tail: false,
            literal_init: false,
            prediction: PredictionKind::V,
        }
    }

    /// Checks 1 ≤ k_start ≤ T against the schedule the sampler will walk.
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.k_start < 1 || self.k_start > t_steps {
            return Err(PipelineError::StepOutOfRange {
                step: self.k_start,
                lo: 1,
                hi: t_steps,
            });
        }
        self.guidance.validate()?;
        Ok(())
    }
}
