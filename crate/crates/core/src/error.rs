use std::path::PathBuf;

use segda_grad::GradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty segment representation (no present classes)")]
    EmptyRepresentation,
    #[error("infeasible configuration: {0}")]
    Config(String),
    #[error("{}: parse error at byte {offset}: {msg}", file.display())]
    Parse { file: PathBuf, offset: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing artifact: {0}")]
    Missing(String),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
