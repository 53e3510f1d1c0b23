use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("insufficient patients: {0}")]
    InsufficientPatients(String),

    #[error("missing paired CT for {} training image(s): {}", .0.len(), .0.join(", "))]
    MissingPairedCt(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("weights file: {0}")]
    Weights(String),

    #[error("experiment '{spec}': {source}")]
    Experiment {
        spec: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing required spec '{0}'")]
    MissingSpec(String),

    #[error("audit failed: {0}")]
    Audit(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn in_spec(self, spec: &str) -> Self {
        Error::Experiment {
            spec: spec.to_string(),
            source: Box::new(self),
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Empty(_) => "empty",
            Error::InsufficientPatients(_) => "insufficient_patients",
            Error::MissingPairedCt(_) => "missing_paired_ct",
            Error::Shape(_) => "shape",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Weights(_) => "weights",
            Error::Experiment { source, .. } => source.kind(),
            Error::MissingSpec(_) => "missing_spec",
            Error::Audit(_) => "audit",
        }
    }
}
