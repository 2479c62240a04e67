//! Minimal key=value configuration files.
//!
//! Grammar: one `key = value` per line, `#` starts a comment (full-line or
//! trailing), blank lines ignored. Keys are `[a-z0-9_.]+`. Duplicate keys
//! are an error, as are keys the consumer does not recognize — silent typos
//! in experiment configs are worse than loud ones.

use crate::error::{CoreError, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
            {
                return Err(CoreError::Config(format!(
                    "line {}: bad key `{key}` (want [a-z0-9_.]+)",
                    lineno + 1
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CoreError::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::UnreadableFile {
            path: path.to_owned(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|v| v.as_str())
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.typed(key, "integer", |v| v.parse::<u64>().ok())
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.typed(key, "integer", |v| v.parse::<usize>().ok())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.typed(key, "number", |v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.typed(key, "true/false", |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    fn typed<T>(&self, key: &str, want: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => parse(v).map(Some).ok_or_else(|| {
                CoreError::Config(format!("key `{key}`: expected {want}, got `{v}`"))
            }),
        }
    }

    /// Errors if any key is not in the allowed set. Call after pulling all
    /// recognized keys so typos surface immediately.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
        for k in self.entries.keys() {
            if !allowed.contains(k.as_str()) {
                return Err(CoreError::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }
}

/// Writes a resolved-configuration snapshot: every effective value after
/// defaults and overrides, one `key = value` per line in sorted order, so a
/// run can be reproduced from its output directory alone.
pub fn write_resolved_snapshot(
    path: impl AsRef<Path>,
    pairs: &[(&str, String)],
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::UnwritablePath {
                path: path.to_owned(),
                source: e,
            })?;
        }
    }
    let mut sorted: Vec<&(&str, String)> = pairs.iter().collect();
    sorted.sort_by_key(|(k, _)| *k);
    let mut out = String::from("# resolved configuration (auto-generated)\n");
    for (k, v) in sorted {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CoreError::UnwritablePath {
        path: path.to_owned(),
        source: e,
    })
}
