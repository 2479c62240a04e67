//! Dataset manifests: which volumes exist, how they pair up, and which
//! split each subject belongs to. Stored as JSON with paths relative to
//! the manifest file's directory.

use crate::error::{CoreError, Result};
use crate::io::load_volume;
use crate::volume::VolumeGrid;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }
}

/// A matched uLF-HF pair for one subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedEntry {
    pub subject_id: String,
    pub ulf: PathBuf,
    pub hf: PathBuf,
    /// Lesion class label when the subject carries one (phantom datasets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_class: Option<u8>,
}

/// A single unpaired volume for one subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleEntry {
    pub subject_id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_class: Option<u8>,
}

/// The volumes available to one split of the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub paired: Vec<PairedEntry>,
    #[serde(default)]
    pub hf_only: Vec<SingleEntry>,
    #[serde(default)]
    pub ulf_only: Vec<SingleEntry>,
}

impl DatasetManifest {
    pub fn empty(split: Split) -> Self {
        Self {
            split,
            paired: Vec::new(),
            hf_only: Vec::new(),
            ulf_only: Vec::new(),
        }
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        let mut s: BTreeSet<&str> = BTreeSet::new();
        s.extend(self.paired.iter().map(|p| p.subject_id.as_str()));
        s.extend(self.hf_only.iter().map(|p| p.subject_id.as_str()));
        s.extend(self.ulf_only.iter().map(|p| p.subject_id.as_str()));
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| CoreError::UnwritablePath {
                    path: path.to_owned(),
                    source: e,
                })?;
            }
        }
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| CoreError::UnwritablePath {
            path: path.to_owned(),
            source: e,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::UnreadableFile {
            path: path.to_owned(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| CoreError::Manifest(format!(
            "{}: {e}",
            path.display()
        )))
    }

    /// Loads every paired volume (paths resolved against `base`), checking
    /// that each pair shares a shape. Returns (uLF, HF, subject) triples.
    pub fn load_pairs(&self, base: &Path) -> Result<Vec<(VolumeGrid, VolumeGrid, String)>> {
        let mut out = Vec::with_capacity(self.paired.len());
        for entry in &self.paired {
            let ulf = load_volume(base.join(&entry.ulf))?;
            let hf = load_volume(base.join(&entry.hf))?;
            if !ulf.same_shape(&hf) {
                return Err(CoreError::Manifest(format!(
                    "pair {} has mismatched shapes {:?} vs {:?}",
                    entry.subject_id,
                    ulf.shape(),
                    hf.shape()
                )));
            }
            out.push((ulf, hf, entry.subject_id.clone()));
        }
        Ok(out)
    }
}

/// Checks that no subject id appears in more than one split.
pub fn validate_disjoint_splits(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut owner: std::collections::BTreeMap<String, Split> = Default::default();
    for m in manifests {
        for subj in m.subjects() {
            if let Some(prev) = owner.get(subj) {
                if *prev != m.split {
                    return Err(CoreError::Manifest(format!(
                        "subject {subj} appears in both {} and {}",
                        prev.as_str(),
                        m.split.as_str()
                    )));
                }
            }
            owner.insert(subj.to_string(), m.split);
        }
    }
    Ok(())
}
