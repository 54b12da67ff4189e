//! Experiment driver for `krnet-core`: configuration files, checkpoints,
//! per-run artifacts and pinned reproduction cases.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod repro;
pub mod runner;
pub mod svg;

pub use checkpoint::Checkpoint;
pub use commands::main_with;
pub use config::{EvalConfig, ExperimentConfig, Overrides};
pub use error::{exit, CliError, CliResult};
