//! Critical batch size laboratory.
//!
//! The crate has two halves that meet in the middle:
//!
//! * an analytical side for single-pass mini-batch SGD on power-law Gaussian
//!   least squares: [`problem`] builds instances, [`sgd_sim`] simulates them by
//!   Monte Carlo and [`risk_oracle`] computes the expected excess risk of the
//!   averaged iterate exactly from the covariance recursions;
//! * an empirical side: [`trainer`] measures steps-to-target with Adam,
//!   schedulers and weight averaging, [`cbs_fit`] turns (batch, steps)
//!   observations into critical batch sizes and scaling laws, and [`harness`]
//!   orchestrates sweeps and writes records and reports.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbs_fit;
pub mod error;
pub mod harness;
pub mod problem;
pub mod risk_oracle;
pub mod rng;
pub mod sgd_sim;
pub mod trainer;

pub use error::{Error, Result};
