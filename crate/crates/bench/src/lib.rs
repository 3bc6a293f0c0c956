//! Command-line harness around `prompt-adapt-core`: dataset generation,
//! source training, adaptation runs, sweeps and consolidated reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod summary;

pub use config::RunConfig;
pub use error::CliError;
