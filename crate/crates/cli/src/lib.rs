//! Library side of the `ebm` command: configuration, the subcommands, and
//! the exit-code mapping. `main.rs` only parses flags.

pub mod commands;
pub mod config;
pub mod error;
pub mod parallel;
pub mod svg;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
