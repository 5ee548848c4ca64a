use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EdlError>;

#[derive(Debug, Error)]
pub enum EdlError {
    #[error("{function} is undefined for argument {value}")]
    Domain { function: &'static str, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("{0} requires both positive and negative examples")]
    SingleClass(&'static str),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        line: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("loss {loss} cannot use a {target} target")]
    IncompatibleTarget {
        loss: &'static str,
        target: &'static str,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("forward cache is stale: parameters changed since it was computed")]
    StaleCache,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EdlError {
    /// Stable machine-readable category, used in the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            EdlError::Domain { .. } => "domain",
            EdlError::DimensionMismatch { .. } => "dimension_mismatch",
            EdlError::InvalidInput(_) => "invalid_input",
            EdlError::EmptyInput(_) => "empty_input",
            EdlError::SingleClass(_) => "single_class",
            EdlError::Parse { .. } => "parse",
            EdlError::LabelOutOfRange { .. } => "label_out_of_range",
            EdlError::IncompatibleTarget { .. } => "incompatible_target",
            EdlError::NonFiniteLoss { .. } => "non_finite_loss",
            EdlError::StaleCache => "stale_cache",
            EdlError::Config(_) => "config",
            EdlError::ModelFormat(_) => "model_format",
            EdlError::Io { .. } => "io",
            EdlError::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EdlError::Io {
            path: path.into(),
            source,
        }
    }
}
