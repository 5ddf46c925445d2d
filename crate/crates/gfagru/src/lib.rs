//! Dynamic generative factor model with attention-GRU parameter forecasting
//! and CVaR portfolio construction.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors, a reverse-mode tape, and the RMSProp
//!   optimizer used by every trainable component.
//! - [`genfactor`]: the heavy-tail generative transform `g`, exact inverse,
//!   change-of-variable likelihoods, and scenario simulation.
//! - [`agru`]: the attention-GRU network that maps feature windows to
//!   time-varying factor-model coefficients.
//! - [`trainer`]: the two-step alternating estimation procedure (network
//!   coefficients vs. tail parameters) with ensemble forecasting.
//! - [`cvar`] / [`simplex`]: empirical CVaR and the sample-average LP solver.
//! - [`garch`], [`dcc`], [`benchmarks`]: benchmark strategies (equal weight,
//!   static scenario SAA, single-factor DCC with monthly moments).
//! - [`backtest`], [`metrics`], [`coverage`]: rolling rebalance evaluation,
//!   performance statistics, and VaR coverage tests.
//! - [`data`] / [`synth`]: price-table ingestion, feature construction,
//!   chronological splits, and the synthetic data generator.

pub mod agru;
pub mod autodiff;
pub mod backtest;
pub mod benchmarks;
pub mod coverage;
pub mod cvar;
pub mod data;
pub mod dcc;
pub mod error;
pub mod garch;
pub mod genfactor;
pub mod metrics;
pub mod simplex;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
