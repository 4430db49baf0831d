pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{ExperimentConfig, Overrides};
pub use error::CliError;
