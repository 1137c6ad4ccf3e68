use serde::{Deserialize, Serialize};

use super::StepLawFit;
use crate::{Error, Result};

/// Overhead relative to linear scaling that defines the critical batch size.
pub const DEFAULT_OVERHEAD: f64 = 0.2;
/// Upper end of the root search.
pub const SEARCH_CEILING: f64 = 1e9;

const SCAN_POINTS: usize = 4096;
const BISECT_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalBatch {
    pub batch: f64,
    pub log2: f64,
    /// The overhead equation changed sign more than once above `B_opt`; the
    /// smallest root was returned.
    pub multiple_roots: bool,
}

impl CriticalBatch {
    fn new(batch: f64, multiple_roots: bool) -> Self {
        Self {
            batch,
            log2: batch.log2(),
            multiple_roots,
        }
    }
}

/// Solves `(a + b/B^α) · B = (1 + ρ) · (a + b/B_opt^α) · B_opt` for `B > B_opt`.
///
/// For `α = 1` this is `B* = (1 + ρ) B_opt + ρ b / a`; otherwise the root is
/// bracketed on `[B_opt, SEARCH_CEILING]` and bisected.
pub fn critical_batch(fit: &StepLawFit, b_opt: f64, overhead: f64) -> Result<CriticalBatch> {
    check(fit, b_opt, overhead)?;
    if fit.alpha == 1.0 {
        return Ok(CriticalBatch::new(
            (1.0 + overhead) * b_opt + overhead * fit.b / fit.a,
            false,
        ));
    }
    let (root, multiple) = solve_overhead_root(fit, b_opt, overhead)?;
    Ok(CriticalBatch::new(root, multiple))
}

fn check(fit: &StepLawFit, b_opt: f64, overhead: f64) -> Result<()> {
    if !(overhead > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "overhead must be positive, got {overhead}"
        )));
    }
    if !(b_opt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "B_opt must be positive, got {b_opt}"
        )));
    }
    if !(fit.a > 0.0) || !(fit.b >= 0.0) || !(fit.alpha > 0.0) {
        return Err(Error::InvalidArgument(
            "step law needs a > 0, b ≥ 0, α > 0".into(),
        ));
    }
    Ok(())
}

/// Numeric root of the overhead equation, returning the smallest root above
/// `B_opt` and whether more than one sign change was seen.
pub fn solve_overhead_root(fit: &StepLawFit, b_opt: f64, overhead: f64) -> Result<(f64, bool)> {
    check(fit, b_opt, overhead)?;
    let data = |bb: f64| fit.a * bb + fit.b * bb.powf(1.0 - fit.alpha);
    let target = (1.0 + overhead) * data(b_opt);
    let excess = |bb: f64| data(bb) - target;

    let (lo_log, hi_log) = (b_opt.ln(), SEARCH_CEILING.ln());
    if !(hi_log > lo_log) {
        return Err(Error::NoRoot {
            lo: b_opt,
            hi: SEARCH_CEILING,
        });
    }
    let at = |k: usize| (lo_log + (hi_log - lo_log) * k as f64 / SCAN_POINTS as f64).exp();

    let mut bracket = None;
    let mut sign_changes = 0;
    let mut prev = (b_opt, excess(b_opt));
    for k in 1..=SCAN_POINTS {
        let x = at(k);
        let fx = excess(x);
        if (prev.1 < 0.0) != (fx < 0.0) {
            sign_changes += 1;
            bracket.get_or_insert((prev.0, x));
        }
        prev = (x, fx);
    }
    let Some((mut lo, mut hi)) = bracket else {
        return Err(Error::NoRoot {
            lo: b_opt,
            hi: SEARCH_CEILING,
        });
    };
    let lo_neg = excess(lo) < 0.0;
    while hi - lo > BISECT_REL_TOL * lo {
        let mid = 0.5 * (lo + hi);
        if (excess(mid) < 0.0) == lo_neg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if sign_changes > 1 {
        log::warn!("overhead equation has {sign_changes} sign changes; using the smallest root");
    }
    Ok((0.5 * (lo + hi), sign_changes > 1))
}
