use std::path::PathBuf;

/// Errors raised by volume construction, preprocessing, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("volume contains {count} non-finite voxel(s)")]
    NonFiniteData { count: usize },

    #[error("cannot write {path}: {source}")]
    UnwritablePath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("constant volume: intensity range is degenerate (min == max)")]
    ConstantVolume,

    #[error("degenerate target: resulting dimension {dim} < 4")]
    DegenerateTarget { dim: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
