//! Std companion to `glimpse-core`: configuration, dataset and checkpoint files,
//! heatmap rendering, the invariant suite and the `glimpse` command line.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod render;

pub use error::{CliError, CliResult};
