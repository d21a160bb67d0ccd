//! Batch driver: simulate designs, fit estimators, score recovery, estimate
//! holdout likelihoods and run scree analyses. Every command writes a
//! `manifest.json` next to its artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod split;

pub use error::{CliError, CliResult};
