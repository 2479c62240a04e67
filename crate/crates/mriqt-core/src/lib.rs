//! Core volume types, file I/O, preprocessing, dataset manifests, and
//! seeded randomness shared by the rest of the workspace.

pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod preprocess;
pub mod rng;
pub mod volume;

pub use error::{CoreError, Result};
pub use manifest::{DatasetManifest, PairedEntry, SingleEntry, Split};
pub use volume::{Modality, VolumeGrid};
