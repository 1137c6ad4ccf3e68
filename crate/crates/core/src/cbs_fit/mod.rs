//! Critical batch size from steps-to-target measurements.
//!
//! The pipeline is: observations `(B, Y)` at one scale → [`fit_step_law`] for
//! `Y(B) = a + b / B^α` → [`critical_batch`] at a chosen overhead → across
//! scales, [`fit_cbs_law`] for `B*(s) = c + k · s^β` → [`forecast`].

mod critical;
mod gauss_newton;
mod observations;
mod scaling;
mod step_law;
mod steps;

use serde::{Deserialize, Serialize};

pub use critical::{
    critical_batch, solve_overhead_root, CriticalBatch, DEFAULT_OVERHEAD, SEARCH_CEILING,
};
pub use observations::{
    critical_points, group_by_scale, read_observations, write_observations, ScalePoint,
};
pub use scaling::{fit_cbs_law, forecast, CbsLawFit, ScaleKind};
pub use step_law::{fit_step_law, AlphaMode, StepLawFit, CLAMP_FLOOR};
pub use steps::{chinchilla_steps, relative_steps, CHINCHILLA_RATIO, CONTEXT_LENGTH};

/// Steps needed to reach the target loss at one batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepObservation {
    pub batch: u64,
    pub steps: f64,
    /// Model size in millions of parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_millions: Option<f64>,
    /// Training data size in tokens (or samples).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<f64>,
}

impl StepObservation {
    pub fn new(batch: u64, steps: f64) -> Self {
        Self {
            batch,
            steps,
            model_millions: None,
            tokens: None,
        }
    }
}
