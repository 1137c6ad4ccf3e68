//! Damped Gauss-Newton for small nonlinear least-squares problems.

use nalgebra::{DMatrix, DVector};

pub(crate) const MAX_ITERATIONS: usize = 500;
pub(crate) const REL_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 60;

/// Residuals and Jacobian (rows = observations) at a parameter vector.
pub(crate) trait Model {
    fn residuals(&self, params: &[f64]) -> Vec<f64>;
    fn jacobian(&self, params: &[f64]) -> DMatrix<f64>;
    /// Per-parameter lower bounds; iterates below are clamped.
    fn lower_bounds(&self) -> Vec<Option<f64>>;
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub params: Vec<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub clamped: bool,
}

pub(crate) fn rss(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

fn clamp(params: &mut [f64], bounds: &[Option<f64>]) -> bool {
    let mut hit = false;
    for (p, b) in params.iter_mut().zip(bounds) {
        if let Some(lo) = b {
            if !(*p >= *lo) {
                *p = *lo;
                hit = true;
            }
        }
    }
    hit
}

/// Gauss-Newton direction with parameters that would cross their lower bound
/// pinned to it and the remaining ones re-solved.
fn bounded_step(
    jac: &DMatrix<f64>,
    r: &DVector<f64>,
    params: &[f64],
    bounds: &[Option<f64>],
) -> Option<(Vec<f64>, bool)> {
    let k = params.len();
    let mut pinned: Vec<Option<f64>> = vec![None; k];
    loop {
        let free: Vec<usize> = (0..k).filter(|j| pinned[*j].is_none()).collect();
        let mut rhs = -r.clone();
        for (j, d) in pinned.iter().enumerate() {
            if let Some(d) = d {
                rhs -= jac.column(j) * *d;
            }
        }
        let mut step: Vec<f64> = pinned.iter().map(|d| d.unwrap_or(0.0)).collect();
        if !free.is_empty() {
            let mut sub = jac.select_columns(&free);
            // Column scaling keeps the solve well conditioned when parameters
            // differ by many orders of magnitude.
            let mut scale = vec![1.0; free.len()];
            for (c, s) in scale.iter_mut().enumerate() {
                let norm = sub.column(c).norm();
                if norm > 0.0 {
                    *s = norm;
                    sub.column_mut(c).scale_mut(1.0 / norm);
                }
            }
            let sol = sub.svd(true, true).solve(&rhs, 1e-12).ok()?;
            for (c, &j) in free.iter().enumerate() {
                step[j] = sol[c] / scale[c];
            }
        }
        let mut changed = false;
        for &j in &free {
            if let Some(lo) = bounds[j] {
                if params[j] + step[j] < lo {
                    pinned[j] = Some(lo - params[j]);
                    changed = true;
                }
            }
        }
        if !changed {
            return Some((step, pinned.iter().any(Option::is_some)));
        }
    }
}

pub(crate) fn solve<M: Model>(model: &M, start: Vec<f64>) -> Solution {
    let bounds = model.lower_bounds();
    let mut params = start;
    let mut clamped = clamp(&mut params, &bounds);
    let mut current = rss(&model.residuals(&params));

    for iter in 1..=MAX_ITERATIONS {
        let r = DVector::from_vec(model.residuals(&params));
        let jac = model.jacobian(&params);
        let Some((step, pinned)) = bounded_step(&jac, &r, &params, &bounds) else {
            break;
        };

        let mut factor = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut trial: Vec<f64> = params
                .iter()
                .zip(&step)
                .map(|(p, s)| p + factor * s)
                .collect();
            let hit = clamp(&mut trial, &bounds) || pinned;
            let value = rss(&model.residuals(&trial));
            if value.is_finite() && value <= current {
                accepted = Some((trial, value, hit));
                break;
            }
            factor *= 0.5;
        }
        let Some((trial, value, hit)) = accepted else {
            // No descent along the Gauss-Newton direction: stationary up to
            // rounding.
            return Solution {
                params,
                rss: current,
                iterations: iter,
                converged: true,
                clamped,
            };
        };
        if hit {
            log::warn!("fit iterate clamped to its lower bound");
            clamped = true;
        }
        let change = trial
            .iter()
            .zip(&params)
            .map(|(n, o)| (n - o).abs() / o.abs().max(1e-300))
            .fold(0.0, f64::max);
        params = trial;
        current = value;
        if change < REL_TOL || current == 0.0 {
            return Solution {
                params,
                rss: current,
                iterations: iter,
                converged: true,
                clamped,
            };
        }
    }
    Solution {
        params,
        rss: current,
        iterations: MAX_ITERATIONS,
        converged: false,
        clamped,
    }
}
