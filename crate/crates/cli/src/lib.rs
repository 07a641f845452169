//! Command-line front end: configuration, checkpoints and one subcommand
//! per pipeline stage.

pub mod commands;
pub mod config;
pub mod failure;
pub mod persist;

pub use commands::{run, Cli};
pub use failure::Failure;
