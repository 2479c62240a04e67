//! Checkpoint files: a one-line JSON header describing the parameter list,
//! a `---` separator, then raw little-endian f64 tensors in header order,
//! optionally followed by AdamW moment buffers for exact training resume.

use crate::optim::AdamW;
use crate::params::ParamStore;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const FORMAT: &str = "mriqt-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamDesc {
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    /// Opaque caller-owned configuration string (verified on load by the
    /// caller, not by this module).
    config: String,
    params: Vec<ParamDesc>,
    adam: Option<AdamDesc>,
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| CheckpointError::Malformed(format!("body truncated: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config: &str,
    adam: Option<&AdamW>,
) -> Result<(), CheckpointError> {
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config: config.to_string(),
        params: store
            .iter_ids()
            .map(|id| ParamDesc {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
            })
            .collect(),
        adam: adam.map(|a| AdamDesc {
            step: a.state().2,
        }),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    w.write_all(b"\n---\n")?;
    for id in store.iter_ids() {
        write_f64s(&mut w, store.value(id).data())?;
    }
    if let Some(a) = adam {
        let (m, v, _) = a.state();
        for buf in m {
            write_f64s(&mut w, buf)?;
        }
        for buf in v {
            write_f64s(&mut w, buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Metadata returned by [`load_checkpoint`].
#[derive(Debug)]
pub struct CheckpointInfo {
    pub config: String,
    pub adam_step: Option<u64>,
}

/// Reads only the header's config string, without touching the body — used
/// to reconstruct a model before loading its weights.
pub fn peek_config(path: &Path) -> Result<String, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| CheckpointError::Malformed("missing header line".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
        if header_line.len() > 1 << 20 {
            return Err(CheckpointError::Malformed("header too long".into()));
        }
    }
    let header: Header = serde_json::from_slice(&header_line)
        .map_err(|e| CheckpointError::Malformed(format!("header json: {e}")))?;
    if header.format != FORMAT {
        return Err(CheckpointError::Malformed(format!(
            "format tag {:?}",
            header.format
        )));
    }
    Ok(header.config)
}

/// Loads parameters (and optionally optimizer moments) into an already
/// constructed model whose parameter names and shapes must match exactly.
pub fn load_checkpoint(
    path: &Path,
    store: &mut ParamStore,
    adam: Option<&mut AdamW>,
) -> Result<CheckpointInfo, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    // Read bytes until newline; the header is a single JSON line.
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| CheckpointError::Malformed("missing header line".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
        if header_line.len() > 1 << 20 {
            return Err(CheckpointError::Malformed("header too long".into()));
        }
    }
    let header: Header = serde_json::from_slice(&header_line)
        .map_err(|e| CheckpointError::Malformed(format!("header json: {e}")))?;
    if header.format != FORMAT {
        return Err(CheckpointError::Malformed(format!(
            "format tag {:?}",
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(CheckpointError::Malformed(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let mut sep = [0u8; 4];
    r.read_exact(&mut sep)
        .map_err(|_| CheckpointError::Malformed("missing separator".into()))?;
    if &sep != b"---\n" {
        return Err(CheckpointError::Malformed("missing --- separator".into()));
    }

    let ids: Vec<_> = store.iter_ids().collect();
    if header.params.len() != ids.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint has {} parameters, model has {}",
            header.params.len(),
            ids.len()
        )));
    }
    for (desc, &id) in header.params.iter().zip(&ids) {
        if desc.name != store.name(id) {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {:?} vs model {:?}",
                desc.name,
                store.name(id)
            )));
        }
        if desc.shape != store.value(id).shape() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {:?} shape {:?} vs model {:?}",
                desc.name,
                desc.shape,
                store.value(id).shape()
            )));
        }
    }
    for &id in &ids {
        let n = store.value(id).numel();
        let vals = read_f64s(&mut r, n)?;
        store.value_mut(id).data_mut().copy_from_slice(&vals);
    }
    let adam_step = if let Some(opt) = adam {
        let desc = header.adam.as_ref().ok_or_else(|| {
            CheckpointError::Mismatch("checkpoint holds no optimizer state".into())
        })?;
        let mut m = Vec::with_capacity(ids.len());
        for &id in &ids {
            m.push(read_f64s(&mut r, store.value(id).numel())?);
        }
        let mut v = Vec::with_capacity(ids.len());
        for &id in &ids {
            v.push(read_f64s(&mut r, store.value(id).numel())?);
        }
        opt.restore(m, v, desc.step);
        Some(desc.step)
    } else {
        header.adam.as_ref().map(|a| a.step)
    };
    Ok(CheckpointInfo {
        config: header.config,
        adam_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWConfig;
    use crate::tensor::Tensor;

    fn small_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("layer.w", Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]));
        s.add("layer.b", Tensor::new([2], vec![-1.0, 0.5]));
        s
    }

    #[test]
    fn roundtrip_preserves_values_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let store = small_store();
        save_checkpoint(&path, &store, "lr = 1e-4", None).unwrap();

        let mut fresh = small_store();
        fresh.value_mut(crate::params::ParamId(0)).data_mut().fill(0.0);
        let info = load_checkpoint(&path, &mut fresh, None).unwrap();
        assert_eq!(info.config, "lr = 1e-4");
        assert_eq!(info.adam_step, None);
        assert_eq!(fresh.value(crate::params::ParamId(0)).data(), store.value(crate::params::ParamId(0)).data());
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut store = small_store();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        // Take two steps so the moments are nonzero.
        for _ in 0..2 {
            for id in store.iter_ids().collect::<Vec<_>>() {
                store.grad_mut(id).data_mut().fill(0.3);
            }
            opt.step(&mut store, 1e-2);
            store.zero_grads();
        }
        save_checkpoint(&path, &store, "", Some(&opt)).unwrap();

        let mut store2 = small_store();
        let mut opt2 = AdamW::new(&store2, AdamWConfig::default());
        let info = load_checkpoint(&path, &mut store2, Some(&mut opt2)).unwrap();
        assert_eq!(info.adam_step, Some(2));
        assert_eq!(opt2.state().0, opt.state().0);
        assert_eq!(opt2.state().1, opt.state().1);
        assert_eq!(
            store2.value(crate::params::ParamId(0)).data(),
            store.value(crate::params::ParamId(0)).data()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &small_store(), "", None).unwrap();

        let mut other = ParamStore::new();
        other.add("layer.w", Tensor::zeros([3, 3]));
        other.add("layer.b", Tensor::zeros([2]));
        let err = load_checkpoint(&path, &mut other, None).unwrap_err();
        assert!(matches!(err, CheckpointError::Mismatch(_)), "{err}");
    }

    #[test]
    fn requesting_moments_from_a_plain_checkpoint_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let store = small_store();
        save_checkpoint(&path, &store, "", None).unwrap();
        let mut store2 = small_store();
        let mut opt = AdamW::new(&store2, AdamWConfig::default());
        let err = load_checkpoint(&path, &mut store2, Some(&mut opt)).unwrap_err();
        assert!(matches!(err, CheckpointError::Mismatch(_)), "{err}");
    }

    #[test]
    fn truncated_body_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &small_store(), "", None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path, &mut small_store(), None).unwrap_err();
        assert!(matches!(err, CheckpointError::Malformed(_)), "{err}");
    }
}
