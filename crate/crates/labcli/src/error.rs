use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] factlab::Error),

    #[error("no fine-tuning checkpoints under {0}")]
    MissingCheckpoints(PathBuf),

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Config(_) => "Config",
            LabError::Core(e) => e.kind(),
            LabError::MissingCheckpoints(_) => "MissingCheckpoints",
            LabError::InvalidSweep(_) => "InvalidSweep",
            LabError::Io { .. } => "Io",
            LabError::Json(_) => "Json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }
}

pub type LabResult<T> = Result<T, LabError>;
