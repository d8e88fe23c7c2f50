//! Experiment drivers and report emission for the `graphrl` binary.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod report;

pub use config::{ConfigError, LabConfig, Overrides};
pub use experiments::{Agent, Lab, LabError};
