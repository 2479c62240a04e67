//! End-to-end training and sampling for the conditional volume denoiser.
//!
//! The trainer owns the loop around the denoiser: it draws a batch of
//! (high-field, condition) pairs, noises the targets to a random step,
//! applies condition dropout, builds the combined velocity-MSE +
//! SNR-weighted perceptual objective as one graph, and runs a single
//! optimizer update per step under a warmup-then-cosine learning-rate
//! schedule. Every step is seeded from (seed, step), so runs — and
//! checkpoint resumes — are bit-reproducible.
//!
//! The sampler inverts the other half: it forward-noises a condition
//! volume to a chosen start step K and walks the reverse chain from there
//! with classifier-free guidance, so the cost and the strength of the
//! edit both scale with K. `batch_sample` runs a manifest of volumes in
//! parallel with per-volume seeds, isolating per-volume failures and
//! recording timings.

mod config;
mod error;
mod objective;
mod sample;
mod train;

pub use config::{PredictionKind, SamplerConfig, TrainConfig};
pub use error::{PipelineError, Result};
pub use objective::{objective_graph, ObjectiveNodes};
pub use sample::{
    batch_sample, sample, BatchOutcome, GeneratedEntry, GuidedPredictor, SampleFailure,
};
pub use train::{
    load_training_pairs, lr_at, StepRecord, TrainLogWriter, TrainPair, Trainer,
};
