//! Command-line plumbing for tabdeco: config parsing, dataset wiring,
//! per-seed runs and machine-readable outputs.

pub mod ablate;
pub mod config;
pub mod error;
pub mod run;
pub mod tools;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use run::ResultRecord;
