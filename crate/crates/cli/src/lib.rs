//! Library side of the `fedl` command-line tool: configuration merging,
//! checkpoints, report records and the subcommand implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod verify;

pub use error::CliError;
