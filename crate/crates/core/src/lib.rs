//! Empirical-likelihood confidence intervals for the optimal value and the
//! optimality gap of stochastic programs observed through i.i.d. data.
//!
//! The interval endpoints are the optimal values of a pair of
//! distributionally robust programs over a Burg-entropy divergence ball
//! centred at the uniform empirical weights, with the ball size taken from a
//! χ² quantile. CLT-based baselines and a Monte Carlo coverage harness are
//! included for comparison.

pub mod divergence;
pub mod drosolve;
pub mod elweights;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod lp;
pub mod problems;
pub mod sample;
pub mod stats;

pub use error::{Error, Result};
pub use sample::SampleSet;
