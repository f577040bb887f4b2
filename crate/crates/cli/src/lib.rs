//! Batch workflows over the cropdet core library: detection, classification,
//! alignment training, evaluation and caption-dataset tooling.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod registry;
pub mod render;

pub use error::{CliError, CliResult};
