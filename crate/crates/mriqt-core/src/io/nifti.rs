//! Minimal NIfTI-1 reader/writer for single-frame float32 volumes,
//! plain or gzipped.
//!
//! Covers exactly what the pipeline produces and consumes: 3D float32
//! images with positive pixdim. Byte-swapped (big-endian) files are
//! detected via the `dim[0]` heuristic and converted on read. Modality
//! and subject id round-trip through the 80-byte `descrip` field.

use crate::error::{CoreError, Result};
use crate::volume::{Modality, VolumeGrid};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_FLOAT32: i16 = 16;

pub fn is_nifti_path(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn is_gz_path(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.ends_with(".gz"))
        .unwrap_or(false)
}

fn rd_i16(b: &[u8], off: usize, swap: bool) -> i16 {
    let raw = [b[off], b[off + 1]];
    if swap {
        i16::from_be_bytes(raw)
    } else {
        i16::from_le_bytes(raw)
    }
}

fn rd_f32(b: &[u8], off: usize, swap: bool) -> f32 {
    let raw = [b[off], b[off + 1], b[off + 2], b[off + 3]];
    if swap {
        f32::from_be_bytes(raw)
    } else {
        f32::from_le_bytes(raw)
    }
}

pub fn load_nifti(path: &Path) -> Result<VolumeGrid> {
    let file_bytes = fs::read(path).map_err(|e| CoreError::UnreadableFile {
        path: path.to_owned(),
        source: e,
    })?;
    // Decompress when the gzip magic is present, whatever the extension says.
    let bytes = if file_bytes.len() >= 2 && file_bytes[0] == 0x1f && file_bytes[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(&file_bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| CoreError::CorruptHeader {
                path: path.to_owned(),
                reason: format!("gzip decode failed: {e}"),
            })?;
        out
    } else {
        file_bytes
    };

    let corrupt = |reason: String| CoreError::CorruptHeader {
        path: path.to_owned(),
        reason,
    };

    if bytes.len() < HEADER_SIZE {
        return Err(corrupt(format!("file is {} bytes, header needs 348", bytes.len())));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(corrupt(format!("bad magic {:?}", &magic)));
    }

    // NIfTI stores dim[0] in 1..=7; anything else means opposite endianness.
    let mut swap = false;
    let ndim_le = rd_i16(&bytes, 40, false);
    if !(1..=7).contains(&ndim_le) {
        let ndim_be = rd_i16(&bytes, 40, true);
        if (1..=7).contains(&ndim_be) {
            swap = true;
        } else {
            return Err(corrupt(format!("implausible dim[0] = {ndim_le}")));
        }
    }

    let ndim = rd_i16(&bytes, 40, swap);
    if !(1..=3).contains(&ndim) {
        // allow trailing singleton dims
        let extra_ok = (4..=7).all(|i| {
            let d = rd_i16(&bytes, 40 + 2 * i as usize, swap);
            d <= 1
        });
        if !(ndim >= 4 && extra_ok) {
            return Err(corrupt(format!("unsupported dim[0] = {ndim}")));
        }
    }
    let dims = [
        rd_i16(&bytes, 42, swap) as usize,
        rd_i16(&bytes, 44, swap) as usize,
        rd_i16(&bytes, 46, swap) as usize,
    ];
    if dims.iter().any(|&d| d == 0) {
        return Err(corrupt(format!("zero spatial dim in {:?}", dims)));
    }

    let datatype = rd_i16(&bytes, 70, swap);
    if datatype != DT_FLOAT32 {
        return Err(corrupt(format!(
            "unsupported datatype {datatype}, only float32 (16) is handled"
        )));
    }
    let spacing = [
        rd_f32(&bytes, 80, swap).abs(),
        rd_f32(&bytes, 84, swap).abs(),
        rd_f32(&bytes, 88, swap).abs(),
    ];
    let spacing = [
        if spacing[0] > 0.0 { spacing[0] } else { 1.0 },
        if spacing[1] > 0.0 { spacing[1] } else { 1.0 },
        if spacing[2] > 0.0 { spacing[2] } else { 1.0 },
    ];
    let vox_offset = rd_f32(&bytes, 108, swap) as usize;
    let vox_offset = if vox_offset < HEADER_SIZE { VOX_OFFSET } else { vox_offset };
    let scl_slope = rd_f32(&bytes, 112, swap);
    let scl_inter = rd_f32(&bytes, 116, swap);

    let descrip = String::from_utf8_lossy(&bytes[148..228]).to_string();
    let (modality, subject_id) = parse_descrip(&descrip);

    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() < vox_offset + n * 4 {
        return Err(corrupt(format!(
            "body truncated: need {} bytes at offset {vox_offset}, file has {}",
            n * 4,
            bytes.len()
        )));
    }
    let body = &bytes[vox_offset..vox_offset + n * 4];
    let apply_scl = scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0);
    // NIfTI body is x-fastest; VolumeGrid is D-fastest with shape (H, W, D).
    // Treating dims as (D, W, H) and transposing keeps voxel (i,j,k) identity.
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let mut data = vec![0.0f32; n];
    let mut src = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = &body[src * 4..src * 4 + 4];
                let raw = if swap {
                    f32::from_be_bytes([c[0], c[1], c[2], c[3]])
                } else {
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]])
                };
                let v = if apply_scl { raw * scl_slope + scl_inter } else { raw };
                data[(x * ny + y) * nz + z] = v;
                src += 1;
            }
        }
    }

    VolumeGrid::new(data, [nx, ny, nz], [spacing[0], spacing[1], spacing[2]], modality, subject_id)
}

pub fn save_nifti(v: &VolumeGrid, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CoreError::UnwritablePath {
                path: path.to_owned(),
                source: e,
            })?;
        }
    }
    let [h, w, d] = v.shape();
    let sp = v.spacing_mm();

    let mut hdr = vec![0u8; VOX_OFFSET];
    hdr[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    // dim
    hdr[40..42].copy_from_slice(&3i16.to_le_bytes());
    hdr[42..44].copy_from_slice(&(h as i16).to_le_bytes());
    hdr[44..46].copy_from_slice(&(w as i16).to_le_bytes());
    hdr[46..48].copy_from_slice(&(d as i16).to_le_bytes());
    for i in 4..8 {
        hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    hdr[72..74].copy_from_slice(&32i16.to_le_bytes()); // bitpix
    // pixdim
    hdr[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    hdr[80..84].copy_from_slice(&sp[0].to_le_bytes());
    hdr[84..88].copy_from_slice(&sp[1].to_le_bytes());
    hdr[88..92].copy_from_slice(&sp[2].to_le_bytes());
    hdr[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    hdr[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    hdr[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    let descrip = format_descrip(v.modality(), v.subject_id());
    let db = descrip.as_bytes();
    let n = db.len().min(79);
    hdr[148..148 + n].copy_from_slice(&db[..n]);
    // qform/sform off, axis-aligned spacing only
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut payload = hdr;
    payload.reserve(v.num_voxels() * 4);
    // transpose back to x-fastest
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                payload.extend_from_slice(&v.at(x, y, z).to_le_bytes());
            }
        }
    }

    let write_err = |e: std::io::Error| CoreError::UnwritablePath {
        path: path.to_owned(),
        source: e,
    };
    let f = fs::File::create(path).map_err(write_err)?;
    if is_gz_path(path) {
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(&payload).map_err(write_err)?;
        enc.finish().map_err(write_err)?;
    } else {
        let mut f = f;
        f.write_all(&payload).map_err(write_err)?;
    }
    Ok(())
}

fn format_descrip(modality: Modality, subject_id: &str) -> String {
    format!("mriqt:modality={};subject={}", modality.as_str(), subject_id)
}

fn parse_descrip(descrip: &str) -> (Modality, String) {
    let trimmed = descrip.trim_end_matches('\0');
    if let Some(rest) = trimmed.strip_prefix("mriqt:") {
        let mut modality = Modality::HF;
        let mut subject = String::new();
        for part in rest.split(';') {
            if let Some(m) = part.strip_prefix("modality=") {
                if let Some(p) = Modality::parse(m) {
                    modality = p;
                }
            } else if let Some(s) = part.strip_prefix("subject=") {
                subject = s.to_string();
            }
        }
        (modality, subject)
    } else {
        (Modality::HF, String::new())
    }
}
