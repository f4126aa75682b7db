use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum TitError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{op}: non-finite value produced from finite inputs")]
    NonFinite { op: &'static str },

    #[error("{op}: a row has every entry masked out (empty attention context)")]
    EmptyContext { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("config error for `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("environment error: {0}")]
    Env(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("no checkpoint to resume from at {}", .0.display())]
    MissingCheckpoint(std::path::PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl TitError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        TitError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            TitError::Shape { .. } => "shape",
            TitError::InvalidTensor(_) => "tensor",
            TitError::NonFinite { .. } => "non_finite",
            TitError::EmptyContext { .. } => "empty_context",
            TitError::NonScalarLoss(_) => "non_scalar_loss",
            TitError::Config { .. } => "config",
            TitError::Env(_) => "env",
            TitError::Training(_) => "training",
            TitError::MissingCheckpoint(_) => "missing_checkpoint",
            TitError::Format(_) => "format",
            TitError::Io(_) => "io",
            TitError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, TitError>;
