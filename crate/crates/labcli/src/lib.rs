//! Experiment plumbing on top of `factlab`: config files, per-seed runs with
//! their output files, sweeps, OOD curves and gradient checks.

pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod sweep;

pub use config::{ConfigError, ExperimentConfig};
pub use error::{LabError, LabResult};
