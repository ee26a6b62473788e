//! Command-line front end: experiment configs, pipelines, plots and run
//! manifests.

pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod runner;
