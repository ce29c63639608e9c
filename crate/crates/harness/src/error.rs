use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Every problem found in a configuration, not just the first.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("runs are not comparable: {}", .0.join("; "))]
    Mismatch(Vec<String>),

    #[error("unsupported schema: {0}")]
    Schema(String),

    #[error("run at {path} is not complete (status {status})")]
    Incomplete { path: PathBuf, status: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] genreplay_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl HarnessError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        HarnessError::Io { context: context.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Mismatch(_) => "mismatch",
            HarnessError::Schema(_) => "schema",
            HarnessError::Incomplete { .. } => "incomplete_run",
            HarnessError::Io { .. } => "io",
            HarnessError::Core(e) => e.kind(),
            HarnessError::Json(_) => "json",
            HarnessError::Csv(_) => "csv",
            HarnessError::Image(_) => "image",
        }
    }

    /// Machine-readable form written to stderr by the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        let details: Vec<String> = match self {
            HarnessError::Config(v) | HarnessError::Mismatch(v) => v.clone(),
            _ => Vec::new(),
        };
        json!({ "error": { "kind": self.kind(), "message": self.to_string(), "details": details } })
    }
}
