use std::path::PathBuf;

use latentkf_autodiff::AdError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("degenerate point spread: variance {0} must be positive")]
    DegenerateSpread(f64),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {field}: {msg}")]
    Format { field: String, msg: String },
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged in {phase} at epoch {epoch}: {msg}")]
    Divergence {
        phase: String,
        epoch: usize,
        msg: String,
    },
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn storage(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Storage { path, source }
}
