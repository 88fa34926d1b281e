//! Configuration, experiment drivers and artifact writers for the `oed` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::OedConfig;
pub use error::{CliError, Result};
