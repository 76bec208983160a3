//! Experiment harness for the `unforge` command-line tool.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;

pub use config::{ExperimentConfig, RunMethod};
pub use error::CliError;
pub use pipeline::{run_cycles, run_pipeline, sweep_k, Run};
