//! Data handling, portfolio construction, evaluation and benchmark strategies
//! for end-to-end deep trading models.
//!
//! The crate is organised around the daily return panel:
//!
//! - [`marketdata`]: price panels, returns, exponentially-weighted volatility,
//!   winsorisation, universe filtering and a synthetic panel generator.
//! - [`windows`]: expanding-window splits, model batches and date features.
//! - [`objective`]: cost-adjusted portfolio returns and the Sharpe loss.
//! - [`evaluation`]: performance metrics, cost sweeps and rolling diagnostics.
//! - [`benchmarks`]: Long-only, momentum, MACD, LambdaMART and combined strategies.
//! - [`tuning`]: grid search spaces with Random Search, Hyperband and
//!   Gaussian-process Bayesian optimisation.

pub mod benchmarks;
pub mod error;
pub mod evaluation;
pub mod marketdata;
pub mod objective;
pub mod stats;
pub mod tuning;
pub mod windows;

pub use error::{Error, Result};

/// Trading days per year used for every annualisation.
pub const ANNUALISATION: f64 = 252.0;
