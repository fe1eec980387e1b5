//! Experiment harness: synthetic task suites, TOML-configured sweeps, run
//! directories with traces and reports, and overlap analysis over saved
//! traces.

pub mod config;
pub mod experiment;
pub mod overlap;
pub mod report;
pub mod tasks;
