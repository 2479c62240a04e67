//! Conditional 3D denoiser: a residual U-Net with an attention bottleneck
//! that predicts the diffusion velocity v̂ from a noised volume, a condition
//! volume stacked as a second channel, and a timestep embedding.
//!
//! The network is built on the `mriqt-nn` tape graph, so the same forward
//! definition serves inference (gradient-free) and training (with
//! backpropagation through every block). Conditioning supports
//! classifier-free guidance: a per-sample mask swaps the condition for the
//! all-zeros null volume, and [`Denoiser::guided_predict`] merges the
//! conditional and null branches.

mod batch;
mod config;
mod error;
mod model;

pub use batch::{apply_cond_dropout, ConditionBatch};
pub use config::{norm_groups, DenoiserConfig};
pub use error::{DenoiserError, Result};
pub use model::Denoiser;
