use super::StepObservation;
use crate::{Error, Result};

/// Tokens per parameter for compute-optimal training.
pub const CHINCHILLA_RATIO: f64 = 20.34;
pub const CONTEXT_LENGTH: u64 = 512;

/// `C · N / (ctx · B)` rounded to the nearest integer.
pub fn chinchilla_steps(params: f64, batch: u64, context_length: u64, ratio: f64) -> Result<u64> {
    if !(params > 0.0) || batch == 0 || context_length == 0 || !(ratio > 0.0) {
        return Err(Error::InvalidArgument("all inputs must be positive".into()));
    }
    Ok((ratio * params / (context_length as f64 * batch as f64)).round() as u64)
}

/// `(B, Y / Y_ref)` for every observation, in input order.
pub fn relative_steps(obs: &[StepObservation], reference_batch: u64) -> Result<Vec<(u64, f64)>> {
    let reference = obs
        .iter()
        .find(|o| o.batch == reference_batch)
        .ok_or(Error::MissingReference(reference_batch))?
        .steps;
    Ok(obs.iter().map(|o| (o.batch, o.steps / reference)).collect())
}
