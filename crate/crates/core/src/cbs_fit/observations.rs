//! Observation files and the per-scale fitting pipeline.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{
    critical_batch, fit_step_law, AlphaMode, CriticalBatch, ScaleKind, StepLawFit, StepObservation,
};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    scale_n_millions: Option<f64>,
    scale_d_tokens: Option<f64>,
    batch: u64,
    steps: f64,
}

const HEADER: [&str; 4] = ["scale_n_millions", "scale_d_tokens", "batch", "steps"];

/// Reads `scale_n_millions, scale_d_tokens, batch, steps` rows; the scale
/// columns may be empty.
pub fn read_observations<R: Read>(input: R) -> Result<Vec<StepObservation>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.deserialize::<Row>() {
        let r = row?;
        if r.batch == 0 || !(r.steps > 0.0) {
            return Err(Error::Parse(format!(
                "batch and steps must be positive (batch {}, steps {})",
                r.batch, r.steps
            )));
        }
        out.push(StepObservation {
            batch: r.batch,
            steps: r.steps,
            model_millions: r.scale_n_millions,
            tokens: r.scale_d_tokens,
        });
    }
    Ok(out)
}

pub fn write_observations<W: Write>(out: W, obs: &[StepObservation]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(HEADER)?;
    for o in obs {
        w.serialize(Row {
            scale_n_millions: o.model_millions,
            scale_d_tokens: o.tokens,
            batch: o.batch,
            steps: o.steps,
        })?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}

/// Splits observations by the scale column selected by `kind`, in increasing
/// scale order. Rows without that column are an error.
pub fn group_by_scale(
    obs: &[StepObservation],
    kind: ScaleKind,
) -> Result<Vec<(f64, Vec<StepObservation>)>> {
    let mut groups: BTreeMap<u64, (f64, Vec<StepObservation>)> = BTreeMap::new();
    for o in obs {
        let scale = match kind {
            ScaleKind::ModelSizeMillions => o.model_millions,
            ScaleKind::Tokens => o.tokens,
        }
        .ok_or_else(|| {
            Error::Parse(format!(
                "observation at B={} lacks a {kind:?} scale",
                o.batch
            ))
        })?;
        if !(scale > 0.0) {
            return Err(Error::Parse(format!("scale must be positive, got {scale}")));
        }
        groups
            .entry(scale.to_bits())
            .or_insert((scale, Vec::new()))
            .1
            .push(o.clone());
    }
    Ok(groups.into_values().collect())
}

/// Step-law fit and critical batch size at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub scale: f64,
    pub fit: StepLawFit,
    pub critical: CriticalBatch,
}

/// Fits the step law at every scale and solves for its critical batch size.
pub fn critical_points(
    obs: &[StepObservation],
    kind: ScaleKind,
    mode: AlphaMode,
    b_opt: f64,
    overhead: f64,
) -> Result<Vec<ScalePoint>> {
    group_by_scale(obs, kind)?
        .into_iter()
        .map(|(scale, group)| {
            let fit = fit_step_law(&group, mode)?;
            let critical = critical_batch(&fit, b_opt, overhead)?;
            Ok(ScalePoint {
                scale,
                fit,
                critical,
            })
        })
        .collect()
}
