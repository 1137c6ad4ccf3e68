use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::gauss_newton::{self, Model};
use super::StepObservation;
use crate::{Error, Result};

/// Lower bound applied to `a`, `b` and `α` during fitting.
pub const CLAMP_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    #[default]
    FixedOne,
    Free,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-one" | "fixed" | "1" => Ok(AlphaMode::FixedOne),
            "free" => Ok(AlphaMode::Free),
            other => Err(Error::Parse(format!("unknown alpha mode {other:?}"))),
        }
    }
}

/// `Y(B) = a + b / B^α`, fitted in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLawFit {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    /// Residual sum of squares of `log Y`.
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Some iterate hit [`CLAMP_FLOOR`].
    pub clamped: bool,
}

impl StepLawFit {
    pub fn from_params(a: f64, b: f64, alpha: f64) -> Self {
        Self {
            a,
            b,
            alpha,
            alpha_mode: if alpha == 1.0 {
                AlphaMode::FixedOne
            } else {
                AlphaMode::Free
            },
            rss: 0.0,
            iterations: 0,
            converged: true,
            clamped: false,
        }
    }

    pub fn steps_at(&self, batch: f64) -> f64 {
        self.a + self.b * batch.powf(-self.alpha)
    }

    /// Log-space residual sum of squares on `obs`.
    pub fn log_rss(&self, obs: &[StepObservation]) -> f64 {
        obs.iter()
            .map(|o| (o.steps.ln() - self.steps_at(o.batch as f64).ln()).powi(2))
            .sum()
    }

    /// Residual sum of squares of raw step counts; diagnostic only.
    pub fn linear_rss(&self, obs: &[StepObservation]) -> f64 {
        obs.iter()
            .map(|o| (o.steps - self.steps_at(o.batch as f64)).powi(2))
            .sum()
    }
}

struct LogStepLaw<'a> {
    obs: &'a [StepObservation],
    free_alpha: bool,
}

impl LogStepLaw<'_> {
    fn unpack(&self, p: &[f64]) -> (f64, f64, f64) {
        (p[0], p[1], if self.free_alpha { p[2] } else { 1.0 })
    }
}

impl Model for LogStepLaw<'_> {
    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let (a, b, alpha) = self.unpack(p);
        self.obs
            .iter()
            .map(|o| o.steps.ln() - (a + b * (o.batch as f64).powf(-alpha)).ln())
            .collect()
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let (a, b, alpha) = self.unpack(p);
        let cols = if self.free_alpha { 3 } else { 2 };
        DMatrix::from_fn(self.obs.len(), cols, |i, j| {
            let bb = self.obs[i].batch as f64;
            let pw = bb.powf(-alpha);
            let m = a + b * pw;
            match j {
                0 => -1.0 / m,
                1 => -pw / m,
                _ => b * pw * bb.ln() / m,
            }
        })
    }

    fn lower_bounds(&self) -> Vec<Option<f64>> {
        vec![Some(CLAMP_FLOOR); if self.free_alpha { 3 } else { 2 }]
    }
}

/// Fits `log Y = log(a + b / B^α)` by damped Gauss-Newton, starting from the
/// extreme observations: `a₀ = Y(B_max)`, `b₀ = (Y(B_min) − a₀) · B_min`, `α₀ = 1`.
pub fn fit_step_law(obs: &[StepObservation], mode: AlphaMode) -> Result<StepLawFit> {
    let needed = match mode {
        AlphaMode::FixedOne => 3,
        AlphaMode::Free => 4,
    };
    let mut distinct: Vec<u64> = obs.iter().map(|o| o.batch).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < needed {
        return Err(Error::TooFewPoints {
            needed,
            got: distinct.len(),
        });
    }
    if obs
        .iter()
        .any(|o| o.batch == 0 || !(o.steps > 0.0) || !o.steps.is_finite())
    {
        return Err(Error::InvalidArgument(
            "observations need B ≥ 1 and finite positive steps".into(),
        ));
    }

    let lo = obs.iter().min_by_key(|o| o.batch).expect("nonempty");
    let hi = obs.iter().max_by_key(|o| o.batch).expect("nonempty");
    let a0 = hi.steps;
    let b0 = (lo.steps - a0) * lo.batch as f64;
    let free_alpha = mode == AlphaMode::Free;
    let mut start = vec![a0, b0];
    if free_alpha {
        start.push(1.0);
    }

    let model = LogStepLaw { obs, free_alpha };
    let sol = gauss_newton::solve(&model, start);
    if !sol.converged {
        log::warn!(
            "step-law fit did not converge in {} iterations",
            sol.iterations
        );
    }
    let (a, b, alpha) = model.unpack(&sol.params);
    Ok(StepLawFit {
        a,
        b,
        alpha,
        alpha_mode: mode,
        rss: sol.rss,
        iterations: sol.iterations,
        converged: sol.converged,
        clamped: sol.clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(a: f64, b: f64, alpha: f64) -> Vec<StepObservation> {
        (6..=14)
            .map(|k| {
                let bb = (1u64 << k) as f64;
                StepObservation::new(1 << k, a + b * bb.powf(-alpha))
            })
            .collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn recovers_exact_law() {
        let obs = synthetic(1000.0, 1e6, 1.0);
        for mode in [AlphaMode::FixedOne, AlphaMode::Free] {
            let f = fit_step_law(&obs, mode).unwrap();
            assert!(f.converged);
            assert!(rel(f.a, 1000.0) < 1e-6, "{mode:?} a={}", f.a);
            assert!(rel(f.b, 1e6) < 1e-6, "{mode:?} b={}", f.b);
            assert!(rel(f.alpha, 1.0) < 1e-6);
            assert!(f.rss < 1e-20);
        }
    }

    #[test]
    fn recovers_non_unit_alpha() {
        let obs = synthetic(1348.31, 3386537.23, 1.03);
        let f = fit_step_law(&obs, AlphaMode::Free).unwrap();
        assert!(rel(f.a, 1348.31) < 1e-6);
        assert!(rel(f.b, 3386537.23) < 1e-6);
        assert!(rel(f.alpha, 1.03) < 1e-6);
    }

    #[test]
    fn flat_data() {
        let obs: Vec<_> = (6..=12)
            .map(|k| StepObservation::new(1 << k, 500.0))
            .collect();
        let f = fit_step_law(&obs, AlphaMode::FixedOne).unwrap();
        assert!(rel(f.a, 500.0) < 1e-9);
        assert!(f.b <= 1e-6, "b={}", f.b);
        assert!(f.rss < 1e-18);
    }

    #[test]
    fn too_few_points() {
        let obs = vec![
            StepObservation::new(64, 100.0),
            StepObservation::new(128, 60.0),
        ];
        assert!(matches!(
            fit_step_law(&obs, AlphaMode::Free),
            Err(Error::TooFewPoints { needed: 4, got: 2 })
        ));
        let three = vec![
            StepObservation::new(64, 100.0),
            StepObservation::new(128, 60.0),
            StepObservation::new(256, 40.0),
        ];
        assert!(fit_step_law(&three, AlphaMode::FixedOne).is_ok());
        assert!(fit_step_law(&three, AlphaMode::Free).is_err());
    }

    #[test]
    fn fit_is_locally_optimal_on_noisy_data() {
        let noise = [0.03, -0.02, 0.05, -0.04, 0.01, 0.02, -0.03, 0.04, -0.01];
        let obs: Vec<_> = synthetic(2000.0, 3e6, 1.0)
            .into_iter()
            .zip(noise)
            .map(|(mut o, e)| {
                o.steps *= (1.0f64 + e).exp();
                o
            })
            .collect();
        for mode in [AlphaMode::FixedOne, AlphaMode::Free] {
            let f = fit_step_law(&obs, mode).unwrap();
            let base = f.log_rss(&obs);
            assert!((base - f.rss).abs() < 1e-12);
            for which in 0..3 {
                if which == 2 && mode == AlphaMode::FixedOne {
                    continue;
                }
                for s in [0.99, 1.01] {
                    let mut g = f.clone();
                    match which {
                        0 => g.a *= s,
                        1 => g.b *= s,
                        _ => g.alpha *= s,
                    }
                    assert!(g.log_rss(&obs) >= base, "{mode:?} param {which} x{s}");
                }
            }
        }
    }
}
