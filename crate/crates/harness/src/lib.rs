//! Experiment harness: configs, studies and artifacts for the `optomo` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod studies;

pub use error::{HarnessError, Result};
