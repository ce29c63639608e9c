use std::collections::BTreeMap;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label error at row {row}: label {label} outside head of width {width}")]
    Label { row: usize, label: usize, width: usize },

    #[error("class {0} is not registered in the label map")]
    UnknownClass(usize),

    #[error("dataset has no examples for classes {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("balance failure: classes {starving:?} unfilled after {attempts} generated samples; raise the rejection budget or set replay.on_starvation=top-up")]
    BalanceFailure { starving: Vec<usize>, attempts: usize },

    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite {
        step: usize,
        breakdown: BTreeMap<String, f64>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("key mismatch; present on one side only: {0:?}")]
    KeyMismatch(Vec<usize>),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("dataset format: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Label { .. } => "label",
            Error::UnknownClass(_) => "unknown_class",
            Error::MissingClasses(_) => "missing_classes",
            Error::UnsupportedArchitecture(_) => "unsupported_architecture",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::BalanceFailure { .. } => "balance_failure",
            Error::NonFinite { .. } => "non_finite",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::KeyMismatch(_) => "key_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
