//! Closed-form diffusion algebra over volumetric grids: β/ᾱ schedules,
//! forward noising, the v-parametrization and its inversions, classifier-
//! free guidance merging, SNR weighting, and the reverse posterior step.

pub mod error;
pub mod ops;
pub mod schedule;

pub use error::{DiffusionError, Result};
pub use ops::{
    cfg_merge, ddpm_step, eps_from_v, noise_like, q_sample, snr, snr_weight, v_from, v_from_eps,
    x0_from_v, GuidanceConfig, SnrWeightKind,
};
pub use schedule::{load_schedule, make_schedule, save_schedule, NoiseSchedule, ScheduleKind};
