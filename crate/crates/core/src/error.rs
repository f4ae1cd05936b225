use thiserror::Error;

use crate::optimize::TrainTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embedding dimension {dim} is too small: {needed} orthogonal tokens are required")]
    DimensionTooSmall { needed: usize, dim: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        /// Everything recorded up to (and including) the failing iteration.
        trace: Box<TrainTrace>,
    },

    #[error("decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionTooSmall { .. } => "DimensionTooSmall",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::EmptyDataset => "EmptyDataset",
            Error::Shape(_) => "Shape",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::Decode(_) => "Decode",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
