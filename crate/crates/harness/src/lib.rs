//! Experiment harness: configuration, multi-seed runs with cached stages,
//! and cross-method reports.

pub mod config;
pub mod error;
pub mod report;
pub mod run;

pub use config::{validate_config, validate_with_overrides, ExperimentConfig, Tier};
pub use error::{HarnessError, Result};
pub use report::{emit_report, Report, ReportRow};
pub use run::{run, RunManifest, RunStatus};
