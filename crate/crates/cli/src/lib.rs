//! Library side of the `protopinv` command: configuration, checkpoints,
//! data sources and the subcommands themselves.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod source;

pub use error::CliError;
