//! Command-line workflow over `pmri-core`: simulate a dataset, calibrate,
//! reconstruct, train, evaluate, export, or run the whole experiment.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};
