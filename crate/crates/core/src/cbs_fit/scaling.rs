use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::gauss_newton::{self, Model};
use crate::risk_oracle::ols;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleKind {
    /// Model size in millions of parameters.
    #[default]
    ModelSizeMillions,
    /// Training tokens, in the unit chosen by the caller.
    Tokens,
}

/// `B*(s) = c + coefficient · s^exponent`, fitted in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbsLawFit {
    pub constant: f64,
    pub coefficient: f64,
    pub exponent: f64,
    pub scale_kind: ScaleKind,
    pub rss: f64,
    pub converged: bool,
}

impl CbsLawFit {
    pub fn new(constant: f64, coefficient: f64, exponent: f64, scale_kind: ScaleKind) -> Self {
        Self {
            constant,
            coefficient,
            exponent,
            scale_kind,
            rss: 0.0,
            converged: true,
        }
    }
}

pub fn forecast(fit: &CbsLawFit, scale: f64) -> f64 {
    fit.constant + fit.coefficient * scale.powf(fit.exponent)
}

struct LogLaw<'a> {
    points: &'a [(f64, f64)],
}

impl Model for LogLaw<'_> {
    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        self.points
            .iter()
            .map(|(s, b)| b.ln() - (p[0] + p[1] * s.powf(p[2])).ln())
            .collect()
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.points.len(), 3, |i, j| {
            let s = self.points[i].0;
            let pw = s.powf(p[2]);
            let m = p[0] + p[1] * pw;
            match j {
                0 => -1.0 / m,
                1 => -pw / m,
                _ => -p[1] * pw * s.ln() / m,
            }
        })
    }

    fn lower_bounds(&self) -> Vec<Option<f64>> {
        vec![Some(0.0), Some(super::CLAMP_FLOOR), None]
    }
}

/// Fits `log B* = log(c + k · s^β)` to `(scale, B*)` pairs. With
/// `fix_constant` the constant is 0 and the fit is a straight line in log-log
/// coordinates.
pub fn fit_cbs_law(
    points: &[(f64, f64)],
    fix_constant: bool,
    kind: ScaleKind,
) -> Result<CbsLawFit> {
    let needed = if fix_constant { 2 } else { 3 };
    if points.len() < needed {
        return Err(Error::TooFewPoints {
            needed,
            got: points.len(),
        });
    }
    if points.iter().any(|(s, b)| !(*s > 0.0) || !(*b > 0.0)) {
        return Err(Error::InvalidArgument(
            "scales and critical batch sizes must be positive".into(),
        ));
    }
    let first = points[0].0;
    if points.iter().all(|(s, _)| *s == first) {
        return Err(Error::Degenerate("all scales identical".into()));
    }

    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (exponent, intercept) = ols(&xs, &ys)?;
    let line = CbsLawFit {
        constant: 0.0,
        coefficient: intercept.exp(),
        exponent,
        scale_kind: kind,
        rss: xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - intercept - exponent * x).powi(2))
            .sum(),
        converged: true,
    };
    if fix_constant {
        return Ok(line);
    }

    let model = LogLaw { points };
    let sol = gauss_newton::solve(&model, vec![0.0, line.coefficient, line.exponent]);
    Ok(CbsLawFit {
        constant: sol.params[0],
        coefficient: sol.params[1],
        exponent: sol.params[2],
        scale_kind: kind,
        rss: sol.rss,
        converged: sol.converged,
    })
}
