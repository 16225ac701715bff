use std::path::PathBuf;

/// Crate-wide error type. Contract violations on public operations map to
/// dedicated variants so the CLI can translate them into exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("teacher cache miss for image id `{0}` (replay mode never falls back to the network)")]
    CacheMiss(String),

    #[error("remote teacher request failed: {0}")]
    Remote(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("run directory `{0}` already exists (pass --force to overwrite)")]
    RunDirExists(PathBuf),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}
