//! Monte Carlo simulation of single-pass mini-batch SGD with iterate averaging.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::problem::{Batch, SpectralProblem};
use crate::risk_oracle;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub batch_size: u64,
    pub learning_rate: f64,
    pub data_size: u64,
    pub seed: u64,
    #[serde(default)]
    pub record_trajectory: bool,
}

impl SgdConfig {
    pub fn new(batch_size: u64, learning_rate: f64, data_size: u64, seed: u64) -> Self {
        Self {
            batch_size,
            learning_rate,
            data_size,
            seed,
            record_trajectory: false,
        }
    }

    /// Number of SGD steps `n = D / B`.
    pub fn steps(&self) -> Result<u64> {
        if self.batch_size == 0 || self.data_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size and data size must be positive".into(),
            ));
        }
        if !self.data_size.is_multiple_of(self.batch_size) {
            return Err(Error::NotDivisible {
                data_size: self.data_size,
                batch_size: self.batch_size,
            });
        }
        Ok(self.data_size / self.batch_size)
    }

    /// Checks `γ` against [`risk_oracle::stability_margin`] for this batch size.
    pub fn check_stability(&self, problem: &SpectralProblem) -> Result<()> {
        let gamma_max = risk_oracle::stability_margin(problem, self.batch_size);
        if !(self.learning_rate > 0.0) || self.learning_rate > gamma_max {
            return Err(Error::Unstable {
                gamma: self.learning_rate,
                gamma_max,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdRun {
    /// `w_n`.
    pub final_iterate: Vec<f64>,
    /// `(1/n) Σ_{t=0}^{n-1} w_t`.
    pub averaged: Vec<f64>,
    /// `w_0, …, w_n` when requested.
    pub trajectory: Option<Vec<Vec<f64>>>,
    pub samples_drawn: u64,
}

/// Runs `w_{t+1} = w_t − (γ/B) Σ_j (x_j·w_t − y_j) x_j` over `n = D/B` disjoint
/// batches drawn from a stream seeded with `cfg.seed`.
pub fn run_minibatch_sgd(problem: &SpectralProblem, cfg: &SgdConfig) -> Result<SgdRun> {
    let n = cfg.steps()?;
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "learning rate must be positive".into(),
        ));
    }
    let d = problem.dim();
    let b = cfg.batch_size as usize;
    let scale = cfg.learning_rate / b as f64;

    let mut rng = rng::stream(cfg.seed);
    let mut batch = Batch::zeros(b, d);
    let mut w = problem.init().to_vec();
    let mut sum = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut trajectory = cfg.record_trajectory.then(|| vec![w.clone()]);
    let mut drawn = 0u64;

    for t in 0..n {
        for (s, wi) in sum.iter_mut().zip(&w) {
            *s += wi;
        }
        problem.fill_batch(&mut batch, &mut rng);
        drawn += b as u64;

        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, y) in batch.rows() {
            let r = dot(x, &w) - y;
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += r * xi;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= scale * g;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: t + 1 });
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(w.clone());
        }
    }

    let inv = 1.0 / n as f64;
    Ok(SgdRun {
        final_iterate: w,
        averaged: sum.into_iter().map(|s| s * inv).collect(),
        trajectory,
        samples_drawn: drawn,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub reps: usize,
}

/// Mean and standard error of `R(w̄) − σ²` over replicas seeded
/// `cfg.seed, cfg.seed + 1, …`. Replicas run in parallel and are reduced in
/// seed order.
pub fn mc_excess_risk(
    problem: &SpectralProblem,
    cfg: &SgdConfig,
    reps: usize,
) -> Result<McEstimate> {
    let risks = replica_risks(problem, cfg, reps)?;
    let n = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / n;
    let var = risks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        reps,
    })
}

/// Per-replica excess risks of the averaged iterate, in seed order.
pub fn replica_risks(problem: &SpectralProblem, cfg: &SgdConfig, reps: usize) -> Result<Vec<f64>> {
    if reps < 2 {
        return Err(Error::InvalidArgument("need at least 2 replicas".into()));
    }
    cfg.steps()?;
    let outcomes: Vec<Result<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|k| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(k);
            c.record_trajectory = false;
            let run = run_minibatch_sgd(problem, &c)?;
            problem.excess_risk(&run.averaged)
        })
        .collect();

    let mut risks = Vec::with_capacity(reps);
    let mut diverged = 0;
    let mut first_step = None;
    for o in outcomes {
        match o {
            Ok(r) => risks.push(r),
            Err(Error::Diverged { step }) => {
                diverged += 1;
                first_step.get_or_insert(step);
            }
            Err(e) => return Err(e),
        }
    }
    if diverged > 0 {
        return Err(Error::ReplicasDiverged {
            diverged,
            reps,
            first_step: first_step.unwrap_or(0),
        });
    }
    Ok(risks)
}

/// One simulated replica as a flat row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub d: usize,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub sigma2: f64,
    #[serde(rename = "B")]
    pub batch_size: u64,
    pub gamma: f64,
    #[serde(rename = "D")]
    pub data_size: u64,
    pub seed: u64,
    pub excess_risk: Option<f64>,
    pub diverged: bool,
}

/// Runs one replica and reports it as a [`SimRow`], turning divergence into a flag.
pub fn simulate_row(problem: &SpectralProblem, cfg: &SgdConfig) -> Result<SimRow> {
    let (excess_risk, diverged) = match run_minibatch_sgd(problem, cfg) {
        Ok(run) => (Some(problem.excess_risk(&run.averaged)?), false),
        Err(Error::Diverged { .. }) => (None, true),
        Err(e) => return Err(e),
    };
    Ok(SimRow {
        d: problem.dim(),
        a: problem.capacity_exponent(),
        b: problem.source_exponent(),
        sigma2: problem.noise_variance(),
        batch_size: cfg.batch_size,
        gamma: cfg.learning_rate,
        data_size: cfg.data_size,
        seed: cfg.seed,
        excess_risk,
        diverged,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
