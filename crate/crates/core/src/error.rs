use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u64, expected: u64 },

    #[error("training diverged: {0}")]
    Training(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
