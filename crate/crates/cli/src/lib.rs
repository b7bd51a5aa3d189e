//! Command-line pipeline for deep inception network backtests: data
//! preparation, training, reporting, interpretation and complexity tables.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
