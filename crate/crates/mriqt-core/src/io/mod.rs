//! Volume file I/O: NIfTI-1 (`.nii` / `.nii.gz`) and the repo raw format
//! (anything else, with a `.json` sidecar). Formats are documented in
//! `docs/formats.md`.

mod nifti;
mod raw;

pub use nifti::is_nifti_path;
pub use raw::{RAW_FORMAT_NAME, RAW_FORMAT_VERSION};

use crate::error::Result;
use crate::volume::VolumeGrid;
use std::path::Path;

/// Loads a volume, dispatching on the file extension.
pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    let path = path.as_ref();
    if nifti::is_nifti_path(path) {
        nifti::load_nifti(path)
    } else {
        raw::load_raw(path)
    }
}

/// Saves a volume, dispatching on the file extension.
///
/// `load_volume(save_volume(v))` reproduces the data bit-exactly: both
/// formats store raw little-endian float32.
pub fn save_volume(v: &VolumeGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if nifti::is_nifti_path(path) {
        nifti::save_nifti(v, path)
    } else {
        raw::save_raw(v, path)
    }
}
