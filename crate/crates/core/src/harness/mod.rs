//! Experiment harness: configuration, the training loop over
//! (method, imbalance ratio, fold, seed) cells, summaries, file I/O,
//! figures and invariant checks.

pub mod config;
pub mod experiment;
pub mod figures;
pub mod io;
pub mod summary;
pub mod theory;

pub use config::{AugmentConfig, DataConfig, ExperimentConfig, MethodEntry, MethodName};
pub use experiment::{run_experiment, ExperimentOutput, RunResult};
