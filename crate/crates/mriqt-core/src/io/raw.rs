//! The repo raw volume format: a little-endian float32 body file plus a
//! JSON sidecar (`<body>.json`) carrying shape, spacing, and tags.
//!
//! The format exists so the test suite and phantom datasets never depend
//! on an external imaging library. See `docs/formats.md`.

use crate::error::{CoreError, Result};
use crate::volume::{Modality, VolumeGrid};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const RAW_FORMAT_NAME: &str = "mriqt-raw";
pub const RAW_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    format: String,
    version: u32,
    shape: [usize; 3],
    spacing_mm: [f32; 3],
    modality: String,
    subject_id: String,
    dtype: String,
}

fn sidecar_path(body: &Path) -> std::path::PathBuf {
    let mut s = body.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn load_raw(path: &Path) -> Result<VolumeGrid> {
    let sc_path = sidecar_path(path);
    let sc_text = fs::read_to_string(&sc_path).map_err(|e| CoreError::UnreadableFile {
        path: sc_path.clone(),
        source: e,
    })?;
    let sc: RawSidecar = serde_json::from_str(&sc_text).map_err(|e| CoreError::CorruptHeader {
        path: sc_path.clone(),
        reason: e.to_string(),
    })?;
    if sc.format != RAW_FORMAT_NAME {
        return Err(CoreError::CorruptHeader {
            path: sc_path.clone(),
            reason: format!("unknown format tag {:?}", sc.format),
        });
    }
    if sc.dtype != "float32-le" {
        return Err(CoreError::CorruptHeader {
            path: sc_path.clone(),
            reason: format!("unsupported dtype {:?}", sc.dtype),
        });
    }
    let modality = Modality::parse(&sc.modality).ok_or_else(|| CoreError::CorruptHeader {
        path: sc_path.clone(),
        reason: format!("unknown modality {:?}", sc.modality),
    })?;

    let bytes = fs::read(path).map_err(|e| CoreError::UnreadableFile {
        path: path.to_owned(),
        source: e,
    })?;
    let n = sc.shape[0] * sc.shape[1] * sc.shape[2];
    if bytes.len() != n * 4 {
        return Err(CoreError::CorruptHeader {
            path: path.to_owned(),
            reason: format!(
                "body is {} bytes, expected {} for shape {:?}",
                bytes.len(),
                n * 4,
                sc.shape
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    VolumeGrid::new(data, sc.shape, sc.spacing_mm, modality, sc.subject_id)
}

pub fn save_raw(v: &VolumeGrid, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CoreError::UnwritablePath {
                path: path.to_owned(),
                source: e,
            })?;
        }
    }
    let sc = RawSidecar {
        format: RAW_FORMAT_NAME.to_string(),
        version: RAW_FORMAT_VERSION,
        shape: v.shape(),
        spacing_mm: v.spacing_mm(),
        modality: v.modality().as_str().to_string(),
        subject_id: v.subject_id().to_string(),
        dtype: "float32-le".to_string(),
    };
    let sc_path = sidecar_path(path);
    let sc_json = serde_json::to_string_pretty(&sc).expect("sidecar serializes");
    fs::write(&sc_path, sc_json).map_err(|e| CoreError::UnwritablePath {
        path: sc_path.clone(),
        source: e,
    })?;

    let mut bytes = Vec::with_capacity(v.num_voxels() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::UnwritablePath {
        path: path.to_owned(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| CoreError::UnwritablePath {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(())
}
