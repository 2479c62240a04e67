//! Error type for phantom generation and dataset assembly.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Core(#[from] mriqt_core::CoreError),

    #[error(transparent)]
    Kspace(#[from] mriqt_kspace::KspaceError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;
