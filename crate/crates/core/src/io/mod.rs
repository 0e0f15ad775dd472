//! Configuration, file formats and the command line.

pub mod cli;
pub mod config;
pub mod formats;

pub use config::{ConfigError, RunConfig};
pub use formats::FormatError;
