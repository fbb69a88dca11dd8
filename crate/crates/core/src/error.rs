use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset `{domain}` is unusable: {reason}")]
    Dataset { domain: String, reason: String },

    #[error("score set requires both live and spoof samples ({live} live, {spoof} spoof)")]
    SingleClass { live: usize, spoof: usize },

    #[error("index row {row}: {reason}")]
    IndexRow { row: usize, reason: String },

    #[error("non-finite loss `{name}` at epoch {epoch}, step {step}")]
    NonFinite { name: String, epoch: usize, step: usize },

    #[error("domain `{domain}`: {source}")]
    Domain {
        domain: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn in_domain(self, domain: &str) -> Self {
        Error::Domain {
            domain: domain.to_string(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig { .. } => "invalid_config",
            Error::Shape { .. } => "shape",
            Error::EmptyBatch(_) => "empty_batch",
            Error::LabelOutOfRange { .. } => "label_range",
            Error::Dataset { .. } => "dataset",
            Error::SingleClass { .. } => "single_class",
            Error::IndexRow { .. } => "index_row",
            Error::NonFinite { .. } => "non_finite",
            Error::Domain { source, .. } => source.kind(),
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }
}
