//! Deterministic synthetic phantoms standing in for a clinical cohort:
//! nested-ellipsoid heads with lesions from nine intensity classes, a
//! surrogate low-field scanner to produce "real" uLF counterparts, and a
//! dataset builder that writes paired/unpaired cohorts with split
//! manifests.
//!
//! All randomness flows from explicit seeds through per-subject streams,
//! so datasets are byte-identical across reruns and worker counts.

pub mod dataset;
pub mod degrade;
pub mod error;
pub mod generate;
pub mod spec;

pub use dataset::{make_dataset, DatasetSet, DatasetSpec};
pub use degrade::{degrade_reference, top_half_radial_power, DegradeConfig};
pub use error::{PhantomError, Result};
pub use generate::generate_hf;
pub use spec::{lesion_delta_for_class, LesionSpec, PhantomSpec, N_LESION_CLASSES};
