//! Power-law Gaussian least-squares problems.
//!
//! Everything lives in the eigenbasis of the covariance `H`, so `H` is the
//! diagonal `diag(eigenvalues)` and vectors are coordinate arrays in that
//! basis.

use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::{Error, Result};

/// A well-specified Gaussian linear regression instance
/// `x ~ N(0, H)`, `y = x·w* + ε`, `ε ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProblem {
    eigenvalues: Vec<f64>,
    target: Vec<f64>,
    init: Vec<f64>,
    noise_variance: f64,
    capacity_exponent: Option<f64>,
    source_exponent: Option<f64>,
}

impl SpectralProblem {
    /// Power-law instance with `λ_i = i^-a` and `λ_i (w*_i)² = i^-b`.
    pub fn power_law(d: usize, a: f64, b: f64, noise_variance: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument(
                "dimension must be at least 1".into(),
            ));
        }
        if !(a > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "capacity exponent a must exceed 1, got {a}"
            )));
        }
        if !(b > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "source exponent b must exceed 1, got {b}"
            )));
        }
        check_noise(noise_variance)?;
        let eigenvalues = (1..=d).map(|i| (i as f64).powf(-a)).collect();
        let target = (1..=d).map(|i| (i as f64).powf((a - b) / 2.0)).collect();
        Ok(Self {
            eigenvalues,
            target,
            init: vec![0.0; d],
            noise_variance,
            capacity_exponent: Some(a),
            source_exponent: Some(b),
        })
    }

    /// Arbitrary diagonal instance. Eigenvalues must be positive and nonincreasing.
    pub fn new(eigenvalues: Vec<f64>, target: Vec<f64>, noise_variance: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidArgument(
                "dimension must be at least 1".into(),
            ));
        }
        if target.len() != eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                expected: eigenvalues.len(),
                actual: target.len(),
            });
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "eigenvalues must be positive and finite".into(),
            ));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "eigenvalues must be nonincreasing".into(),
            ));
        }
        if target.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("target must be finite".into()));
        }
        check_noise(noise_variance)?;
        let d = eigenvalues.len();
        Ok(Self {
            eigenvalues,
            target,
            init: vec![0.0; d],
            noise_variance,
            capacity_exponent: None,
            source_exponent: None,
        })
    }

    /// Replaces the initial iterate `w₀`.
    pub fn with_init(mut self, init: Vec<f64>) -> Result<Self> {
        if init.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: init.len(),
            });
        }
        self.init = init;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn capacity_exponent(&self) -> Option<f64> {
        self.capacity_exponent
    }

    pub fn source_exponent(&self) -> Option<f64> {
        self.source_exponent
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn top_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `‖w₀ − w*‖²_H`, the initial excess risk.
    pub fn initial_excess(&self) -> f64 {
        self.excess_risk(&self.init)
            .expect("init has problem dimension")
    }

    /// `R(w) = Σ λ_i (w_i − w*_i)² + σ²`.
    pub fn population_risk(&self, w: &[f64]) -> Result<f64> {
        Ok(self.excess_risk(w)? + self.noise_variance)
    }

    /// `R(w) − σ²`.
    pub fn excess_risk(&self, w: &[f64]) -> Result<f64> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: w.len(),
            });
        }
        Ok(self
            .eigenvalues
            .iter()
            .zip(&self.target)
            .zip(w)
            .map(|((l, t), w)| l * (w - t) * (w - t))
            .sum())
    }

    /// Draws `batch_size` fresh samples from the population.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut Stream) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        let mut batch = Batch::zeros(batch_size, self.dim());
        self.fill_batch(&mut batch, rng);
        Ok(batch)
    }

    /// Overwrites `batch` with fresh samples. Per row, draws the `d` covariate
    /// normals in coordinate order and then the noise normal.
    pub fn fill_batch(&self, batch: &mut Batch, rng: &mut Stream) {
        debug_assert_eq!(batch.dim, self.dim());
        let noise_sd = self.noise_variance.sqrt();
        let d = self.dim();
        for (row, y) in batch
            .covariates
            .chunks_exact_mut(d)
            .zip(batch.responses.iter_mut())
        {
            let mut signal = 0.0;
            for ((x, l), t) in row.iter_mut().zip(&self.eigenvalues).zip(&self.target) {
                *x = l.sqrt() * rng::normal(rng);
                signal += *x * t;
            }
            *y = signal + noise_sd * rng::normal(rng);
        }
    }
}

fn check_noise(noise_variance: f64) -> Result<()> {
    if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be finite and nonnegative, got {noise_variance}"
        )));
    }
    Ok(())
}

/// `B` samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    covariates: Vec<f64>,
    responses: Vec<f64>,
    dim: usize,
}

impl Batch {
    pub fn zeros(batch_size: usize, dim: usize) -> Self {
        Self {
            covariates: vec![0.0; batch_size * dim],
            responses: vec![0.0; batch_size],
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.covariates
            .chunks_exact(self.dim)
            .zip(self.responses.iter().copied())
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }
}

/// On-disk problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub d: usize,
    pub a: f64,
    pub b: f64,
    pub sigma2: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ProblemSpec {
    pub fn build(&self) -> Result<SpectralProblem> {
        SpectralProblem::power_law(self.d, self.a, self.b, self.sigma2)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("problem spec serializes")
    }
}
