//! Command-line front end: `calibrate`, `run`, `bound`, `sweep` and `audit`.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
