//! Command implementations behind the `adann` binary.
//!
//! Each command reads one [`ExperimentConfig`](adann::experiment::ExperimentConfig)
//! and writes its outputs plus a `manifest.json` into an output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use error::{CliError, CliResult};
