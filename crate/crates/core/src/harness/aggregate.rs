//! Reducing run records to one steps-to-target observation per batch size.

use std::collections::BTreeMap;

use super::record::{RunModule, RunRecord};
use crate::cbs_fit::StepObservation;
use crate::{Error, Result};

fn check_comparable(records: &[RunRecord]) -> Result<()> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.spec_hash != first.spec_hash) {
            return Err(Error::InvalidArgument(format!(
                "records mix task specs {} and {}",
                first.spec_hash, other.spec_hash
            )));
        }
    }
    Ok(())
}

fn observation(batch: u64, steps: f64, template: &RunRecord) -> StepObservation {
    StepObservation {
        model_millions: template.model_size,
        // Trainer records store tokens consumed, which follows the aggregated steps.
        tokens: match template.module {
            RunModule::Trainer => template.data_size.map(|_| steps * batch as f64),
            _ => template.data_size.map(|d| d as f64),
        },
        ..StepObservation::new(batch, steps)
    }
}

/// For each batch size, the fewest steps to target over every other
/// hyperparameter and seed. Batch sizes where no run reached the target are
/// dropped with a warning.
pub fn best_per_batch(records: &[RunRecord]) -> Result<Vec<StepObservation>> {
    check_comparable(records)?;
    let mut best: BTreeMap<u64, Option<(u64, &RunRecord)>> = BTreeMap::new();
    for r in records {
        let slot = best.entry(r.batch_size).or_insert(None);
        if let Some(s) = r.outcome.steps() {
            if slot.is_none_or(|(cur, _)| s < cur) {
                *slot = Some((s, r));
            }
        }
    }
    Ok(collect(
        best.into_iter()
            .map(|(b, v)| (b, v.map(|(s, r)| (s as f64, r)))),
    ))
}

/// For each batch size, the best seed-averaged steps to target over the other
/// hyperparameters. A setting counts only if every one of its seeds reached
/// the target.
pub fn best_mean_per_batch(records: &[RunRecord]) -> Result<Vec<StepObservation>> {
    check_comparable(records)?;
    type Key = (u64, Option<u64>, u64, Option<u64>, Option<u64>);
    let key = |r: &RunRecord| -> Key {
        (
            r.batch_size,
            r.model_size.map(f64::to_bits),
            r.lr.to_bits(),
            r.ewa_decay.map(f64::to_bits),
            r.beta2.map(f64::to_bits),
        )
    };
    let mut groups: BTreeMap<Key, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(key(r)).or_default().push(r);
    }
    let mut best: BTreeMap<u64, Option<(f64, &RunRecord)>> = BTreeMap::new();
    for ((batch, ..), runs) in &groups {
        let slot = best.entry(*batch).or_insert(None);
        let steps: Option<Vec<u64>> = runs.iter().map(|r| r.outcome.steps()).collect();
        if let Some(steps) = steps {
            let mean = steps.iter().sum::<u64>() as f64 / steps.len() as f64;
            if slot.is_none_or(|(cur, _)| mean < cur) {
                *slot = Some((mean, runs[0]));
            }
        }
    }
    Ok(collect(best.into_iter()))
}

fn collect<'a>(
    it: impl Iterator<Item = (u64, Option<(f64, &'a RunRecord)>)>,
) -> Vec<StepObservation> {
    it.filter_map(|(batch, best)| match best {
        Some((steps, r)) => Some(observation(batch, steps, r)),
        None => {
            log::warn!("batch size {batch}: no run reached the target; excluded");
            None
        }
    })
    .collect()
}
