//! Experiment harness around `mlmc-core`: JSON configs, a rayon executor,
//! report records with JSON/CSV writers, and accuracy sweeps.

// config validation uses negated comparisons so NaN fails closed
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod exec;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{load, ConfigError, ExperimentConfig};
pub use exec::RayonExecutor;
pub use report::Report;
pub use run::{execute, run_one};
