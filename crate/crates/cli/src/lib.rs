//! Library surface of the CLI: config, commands, and manifest types, exposed
//! so integration tests can drive full runs in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::Overrides;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
