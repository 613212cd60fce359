//! Experiment harness around `enki-core`: JSON configs, the `enki` CLI
//! commands, and CSV/JSON artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{ExperimentConfig, Method};
pub use error::BenchError;
