//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("activation site {site} out of range, model has {count} sites")]
    InvalidSite { site: usize, count: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("data format error: {0}")]
    Format(String),
    #[error("solver diverged: {0}")]
    Divergence(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class: config errors 2, data errors 3,
    /// numeric failures 4, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParam(_) => 2,
            Error::Format(_) | Error::EmptyDataset | Error::Io(_) | Error::Json(_) => 3,
            Error::NonFinite { .. } | Error::Divergence(_) => 4,
            _ => 1,
        }
    }
}
