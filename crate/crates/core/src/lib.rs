//! Linear-Gaussian state-space filtering, smoothing and parameter fitting,
//! with a trend-following backtest harness on top.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod gaussian;
pub mod lgssm;
pub mod kalman;
pub mod info_filter;
pub mod smoother;
pub mod estimation;
pub mod backtest;
pub mod cli;

pub use error::{Error, Result};
pub use exec::Execution;
