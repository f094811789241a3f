//! Experiment orchestration behind the command-line tool.

pub mod config;
pub mod plot;
pub mod report;
pub mod run;
pub mod sweep;
pub mod validate;

pub use config::ExperimentConfig;
