//! Exact expected excess risk of averaged mini-batch SGD under Gaussian design.
//!
//! With `H` diagonal and the error covariances starting diagonal, every
//! second-moment matrix in the analysis stays diagonal, so the bias and
//! variance covariance iterates reduce to per-coordinate recursions
//!
//! ```text
//! u ← (1 − γλ)² ∘ u + γ² · K(u) (+ γ²σ²λ/B for the variance part)
//! ```
//!
//! where `K` is the diagonal of the batch fourth-moment correction. The risk of
//! `w̄ = (1/n) Σ_{t<n} w_t` needs the cross-time terms
//! `E[η_s ⊗ η_t] = Cov_s (I − γH)^{t−s}`, which turn the double sum into
//! `(1/n²) Σ_s ⟨λ ∘ W(n−1−s), Cov_s⟩` with `W(m) = 1 + 2 Σ_{u=1}^{m} (1−γλ)^u`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::problem::SpectralProblem;
use crate::{Error, Result};

/// Fraction of `min{B/tr(H), 1/λ₁}` used as the largest admissible step size.
pub const STABILITY_CONSTANT: f64 = 0.5;

/// Default cap on `d · n` for one exact evaluation.
pub const DEFAULT_BUDGET: u128 = 20_000_000_000;

const GEOMETRIC_GUARD: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMode {
    /// `E[GAG] = HAH + (HAH + tr(HA)H)/B`, exact for Gaussian batches.
    #[default]
    ExactGaussian,
    /// `E[GAG] = HAH + (2/B) tr(HA) H`, the operator identity used in the
    /// original analysis.
    PaperOperator,
}

impl std::str::FromStr for MomentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-gaussian" | "exact" => Ok(MomentMode::ExactGaussian),
            "paper-operator" | "paper" => Ok(MomentMode::PaperOperator),
            other => Err(Error::Parse(format!("unknown moment mode {other:?}"))),
        }
    }
}

/// Diagonals of the bias and variance error covariances at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovState {
    pub bias_diag: Vec<f64>,
    pub variance_diag: Vec<f64>,
    pub step: u64,
}

impl CovState {
    pub fn initial(problem: &SpectralProblem) -> Self {
        let bias_diag = problem
            .init()
            .iter()
            .zip(problem.target())
            .map(|(w0, ws)| (w0 - ws) * (w0 - ws))
            .collect();
        Self {
            bias_diag,
            variance_diag: vec![0.0; problem.dim()],
            step: 0,
        }
    }

    /// One application of the covariance update at step size `gamma`.
    pub fn advance(&mut self, problem: &SpectralProblem, gamma: f64, batch: u64, mode: MomentMode) {
        let map = StepMap::new(problem.eigenvalues(), gamma, batch, mode);
        map.apply(&mut self.bias_diag);
        map.apply(&mut self.variance_diag);
        let src = gamma * gamma * problem.noise_variance() / batch as f64;
        for (v, l) in self.variance_diag.iter_mut().zip(problem.eigenvalues()) {
            *v += src * l;
        }
        self.step += 1;
    }
}

/// The linear map `u ↦ diag · u + coupling · λ ⟨λ, u⟩`. It is symmetric, so it
/// is also its own adjoint.
struct StepMap<'a> {
    lambda: &'a [f64],
    diag: Vec<f64>,
    coupling: f64,
}

impl<'a> StepMap<'a> {
    fn new(lambda: &'a [f64], gamma: f64, batch: u64, mode: MomentMode) -> Self {
        let g2b = gamma * gamma / batch as f64;
        let (diag, coupling) = match mode {
            MomentMode::ExactGaussian => (
                lambda
                    .iter()
                    .map(|l| (1.0 - gamma * l).powi(2) + g2b * l * l)
                    .collect(),
                g2b,
            ),
            MomentMode::PaperOperator => (
                lambda.iter().map(|l| (1.0 - gamma * l).powi(2)).collect(),
                2.0 * g2b,
            ),
        };
        Self {
            lambda,
            diag,
            coupling,
        }
    }

    #[inline]
    fn apply(&self, u: &mut [f64]) {
        let tr: f64 = self.lambda.iter().zip(u.iter()).map(|(l, x)| l * x).sum();
        let c = self.coupling * tr;
        for ((x, d), l) in u.iter_mut().zip(&self.diag).zip(self.lambda) {
            *x = d * *x + c * l;
        }
    }
}

/// Expected excess risk of the averaged iterate, split into bias and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub bias: f64,
    pub variance: f64,
    pub total_excess: f64,
    pub kstar: usize,
    pub moment_mode: MomentMode,
    /// `‖w₀ − w*‖²_H / σ²`; the bound assumes this is O(1).
    pub init_to_noise: f64,
}

/// Largest admissible `γ` for batch size `batch`:
/// `STABILITY_CONSTANT · min{B / tr(H), 1 / λ₁}`.
pub fn stability_margin(problem: &SpectralProblem, batch: u64) -> f64 {
    stability_margin_from(problem.trace(), problem.top_eigenvalue(), batch)
}

pub fn stability_margin_from(trace: f64, top: f64, batch: u64) -> f64 {
    STABILITY_CONSTANT * (batch as f64 / trace).min(1.0 / top)
}

/// `max{k : λ_k ≥ B/(Dγ)}`, or 0 when no eigenvalue clears the threshold.
pub fn kstar(lambda: &[f64], data_size: u64, gamma: f64, batch: u64) -> usize {
    let threshold = batch as f64 / (data_size as f64 * gamma);
    lambda.partition_point(|&l| l >= threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub kstar: usize,
    pub bias: f64,
    pub variance: f64,
    pub total: f64,
}

/// The two-sided excess-risk rate for averaged mini-batch SGD:
///
/// `(B/Dγ)² Σ_{i≤k*} δ_i²/λ_i + Σ_{i>k*} λ_i δ_i² + σ² (k* + (Dγ/B)² Σ_{i>k*} λ_i²) / D`
///
/// with `δ = w₀ − w*`.
pub fn theorem2_terms(
    problem: &SpectralProblem,
    data_size: u64,
    gamma: f64,
    batch: u64,
) -> BoundTerms {
    let lambda = problem.eigenvalues();
    let k = kstar(lambda, data_size, gamma, batch);
    let ratio = batch as f64 / (data_size as f64 * gamma);
    let delta2 = problem
        .init()
        .iter()
        .zip(problem.target())
        .map(|(a, b)| (a - b) * (a - b));

    let mut head = 0.0;
    let mut tail = 0.0;
    let mut tail_sq = 0.0;
    for (i, (l, d2)) in lambda.iter().zip(delta2).enumerate() {
        if i < k {
            head += d2 / l;
        } else {
            tail += l * d2;
            tail_sq += l * l;
        }
    }
    let bias = ratio * ratio * head + tail;
    let variance =
        problem.noise_variance() * (k as f64 + tail_sq / (ratio * ratio)) / data_size as f64;
    BoundTerms {
        kstar: k,
        bias,
        variance,
        total: bias + variance,
    }
}

pub fn theorem2_bound(problem: &SpectralProblem, data_size: u64, gamma: f64, batch: u64) -> f64 {
    theorem2_terms(problem, data_size, gamma, batch).total
}

fn check_inputs(
    problem: &SpectralProblem,
    data_size: u64,
    gamma: f64,
    batch: u64,
    budget: u128,
) -> Result<u64> {
    if batch == 0 || data_size == 0 {
        return Err(Error::InvalidArgument(
            "batch and data size must be positive".into(),
        ));
    }
    if !data_size.is_multiple_of(batch) {
        return Err(Error::NotDivisible {
            data_size,
            batch_size: batch,
        });
    }
    check_steps(problem, data_size / batch, gamma, batch, budget)
}

fn check_steps(
    problem: &SpectralProblem,
    steps: u64,
    gamma: f64,
    batch: u64,
    budget: u128,
) -> Result<u64> {
    if steps == 0 || batch == 0 {
        return Err(Error::InvalidArgument(
            "need at least one step of a nonempty batch".into(),
        ));
    }
    let gamma_max = stability_margin(problem, batch);
    if !(gamma > 0.0)
        || gamma > gamma_max * (1.0 + 1e-12)
        || 1.0 - gamma * problem.top_eigenvalue() <= -1.0
    {
        return Err(Error::Unstable { gamma, gamma_max });
    }
    let cost = steps as u128 * problem.dim() as u128;
    if cost > budget {
        return Err(Error::BudgetExceeded { cost, budget });
    }
    Ok(steps)
}

fn breakdown(
    problem: &SpectralProblem,
    data_size: u64,
    gamma: f64,
    batch: u64,
    mode: MomentMode,
    bias: f64,
    variance: f64,
) -> RiskBreakdown {
    let sigma2 = problem.noise_variance();
    RiskBreakdown {
        bias,
        variance,
        total_excess: bias + variance,
        kstar: kstar(problem.eigenvalues(), data_size, gamma, batch),
        moment_mode: mode,
        init_to_noise: if sigma2 > 0.0 {
            problem.initial_excess() / sigma2
        } else {
            f64::INFINITY
        },
    }
}

pub fn exact_excess_risk(
    problem: &SpectralProblem,
    data_size: u64,
    gamma: f64,
    batch: u64,
    mode: MomentMode,
) -> Result<RiskBreakdown> {
    exact_excess_risk_with_budget(problem, data_size, gamma, batch, mode, DEFAULT_BUDGET)
}

/// Evaluates the averaged-iterate risk with one backward pass.
///
/// The weighted sum `Σ_s ⟨w_s, c_s⟩` over the forward states `c_{s+1} = M c_s + f`
/// equals `⟨p_0, c_0⟩ + Σ_{s≥1} ⟨p_s, f⟩` for the adjoint states
/// `p_s = w_s + M p_{s+1}`, `p_{n−1} = w_{n−1}`. Walking `s` downward makes
/// `m = n−1−s` grow, so the geometric weights obey `G(m+1) = q (1 + G(m))`
/// and never need powers or divisions.
pub fn exact_excess_risk_with_budget(
    problem: &SpectralProblem,
    data_size: u64,
    gamma: f64,
    batch: u64,
    mode: MomentMode,
    budget: u128,
) -> Result<RiskBreakdown> {
    let n = check_inputs(problem, data_size, gamma, batch, budget)?;
    Ok(adjoint_risk(problem, n, gamma, batch, mode))
}

/// Risk after `steps` steps of batch `batch`, i.e. `D = steps · batch` samples.
pub fn exact_excess_risk_steps(
    problem: &SpectralProblem,
    steps: u64,
    gamma: f64,
    batch: u64,
    mode: MomentMode,
) -> Result<RiskBreakdown> {
    let n = check_steps(problem, steps, gamma, batch, DEFAULT_BUDGET)?;
    Ok(adjoint_risk(problem, n, gamma, batch, mode))
}

fn adjoint_risk(
    problem: &SpectralProblem,
    n: u64,
    gamma: f64,
    batch: u64,
    mode: MomentMode,
) -> RiskBreakdown {
    let data_size = n * batch;
    let lambda = problem.eigenvalues();
    let d = lambda.len();
    let map = StepMap::new(lambda, gamma, batch, mode);
    let q: Vec<f64> = lambda.iter().map(|l| 1.0 - gamma * l).collect();
    let src_scale = gamma * gamma * problem.noise_variance() / batch as f64;

    let mut geo = vec![0.0; d];
    let mut p: Vec<f64> = lambda.to_vec();
    // Σ_{s≥1} ⟨p_s, λ⟩, the variance source is src_scale · λ.
    let mut source_acc = 0.0;
    for _s in (0..n - 1).rev() {
        source_acc += dot(&p, lambda);
        map.apply(&mut p);
        for ((pi, gi), (qi, li)) in p.iter_mut().zip(geo.iter_mut()).zip(q.iter().zip(lambda)) {
            *gi = qi * (1.0 + *gi);
            *pi += li * (1.0 + 2.0 * *gi);
        }
    }
    let c0 = CovState::initial(problem).bias_diag;
    let n2 = (n as f64) * (n as f64);
    let bias = dot(&p, &c0) / n2;
    let variance = src_scale * source_acc / n2;
    breakdown(problem, data_size, gamma, batch, mode, bias, variance)
}

/// Forward evaluation of the same quantity: iterate the covariance states and
/// weight each by the closed-form geometric tail
/// `Σ_{u=1}^{m} q^u = q (1 − q^m) / (γλ)`. Slower than the adjoint pass; kept
/// as an independent route.
pub fn exact_excess_risk_forward(
    problem: &SpectralProblem,
    data_size: u64,
    gamma: f64,
    batch: u64,
    mode: MomentMode,
) -> Result<RiskBreakdown> {
    let n = check_inputs(problem, data_size, gamma, batch, DEFAULT_BUDGET)?;
    let lambda = problem.eigenvalues();
    let mut state = CovState::initial(problem);
    let mut bias = 0.0;
    let mut variance = 0.0;
    for s in 0..n {
        let m = n - 1 - s;
        for (i, l) in lambda.iter().enumerate() {
            let w = l * (1.0 + 2.0 * geometric_tail(gamma * l, m));
            bias += w * state.bias_diag[i];
            variance += w * state.variance_diag[i];
        }
        if s + 1 < n {
            state.advance(problem, gamma, batch, mode);
        }
    }
    let n2 = (n as f64) * (n as f64);
    Ok(breakdown(
        problem,
        data_size,
        gamma,
        batch,
        mode,
        bias / n2,
        variance / n2,
    ))
}

/// `Σ_{u=1}^{m} (1 − x)^u`.
pub fn geometric_tail(x: f64, m: u64) -> f64 {
    if x.abs() < GEOMETRIC_GUARD {
        return m as f64;
    }
    let q = 1.0 - x;
    q * (1.0 - q.powi(m.min(i32::MAX as u64) as i32)) / x
}

/// Diagonal of `E[G A G]` for `G` the empirical covariance of `batch` Gaussian
/// samples with covariance `diag(lambda)` and a diagonal `A`.
pub fn fourth_moment_diag(
    lambda: &[f64],
    a_diag: &[f64],
    batch: u64,
    mode: MomentMode,
) -> Result<Vec<f64>> {
    if lambda.len() != a_diag.len() {
        return Err(Error::DimensionMismatch {
            expected: lambda.len(),
            actual: a_diag.len(),
        });
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let tr = dot(lambda, a_diag);
    let inv_b = 1.0 / batch as f64;
    Ok(lambda
        .iter()
        .zip(a_diag)
        .map(|(l, a)| {
            let hah = l * a * l;
            match mode {
                MomentMode::ExactGaussian => hah * (1.0 + inv_b) + tr * l * inv_b,
                MomentMode::PaperOperator => hah + 2.0 * inv_b * tr * l,
            }
        })
        .collect())
}

/// Exponent `c` in `B* ∝ D^c` for capacity `a` and source `b`:
/// 0 when `b ≤ a`, otherwise `1 − a / min{b, 2a+1}`.
pub fn cbs_exponent(a: f64, b: f64) -> Result<f64> {
    if !(a > 1.0) || !(b > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "exponents must exceed 1, got a={a}, b={b}"
        )));
    }
    if b <= a {
        return Ok(0.0);
    }
    Ok(1.0 - a / b.min(2.0 * a + 1.0))
}

/// Step sizes to search for each batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaGrid {
    /// The same absolute values for every batch; values above a batch's
    /// stability margin are skipped for that batch.
    Absolute(Vec<f64>),
    /// Fractions of each batch's [`stability_margin`].
    MarginFractions(Vec<f64>),
}

impl GammaGrid {
    /// `2^{-k/per_octave}` for `k = 0..count`, as margin fractions.
    pub fn geometric_fractions(count: usize, per_octave: usize) -> Self {
        GammaGrid::MarginFractions(
            (0..count)
                .map(|k| 2f64.powf(-(k as f64) / per_octave as f64))
                .collect(),
        )
    }

    fn values_for(&self, problem: &SpectralProblem, batch: u64) -> Vec<f64> {
        let gmax = stability_margin(problem, batch);
        match self {
            GammaGrid::Absolute(v) => v
                .iter()
                .copied()
                .filter(|g| *g > 0.0 && *g <= gmax)
                .collect(),
            GammaGrid::MarginFractions(f) => f
                .iter()
                .filter(|f| **f > 0.0 && **f <= 1.0)
                .map(|f| f * gmax)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRisk {
    pub batch: u64,
    pub best_gamma: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCbs {
    /// Largest grid batch within the overhead.
    pub critical_batch: u64,
    /// Where the log-log interpolant of `r(B)` between `critical_batch` and the
    /// next grid batch crosses the limit; equals `critical_batch` when it is
    /// the largest grid batch.
    pub interpolated_batch: f64,
    pub best_risk: f64,
    pub table: Vec<BatchRisk>,
}

/// Critical batch size at data size `data_size` from exact risks:
/// `r(B) = min_γ risk`, and the answer is the largest `B` with
/// `r(B) ≤ (1 + overhead) · min_B r(B)`.
///
/// A batch size that does not divide `data_size` runs `⌊D/B⌋` steps; the
/// trailing partial batch is dropped.
pub fn oracle_cbs(
    problem: &SpectralProblem,
    data_size: u64,
    overhead: f64,
    batches: &[u64],
    gammas: &GammaGrid,
    mode: MomentMode,
) -> Result<OracleCbs> {
    if batches.is_empty() {
        return Err(Error::Infeasible("empty batch grid".into()));
    }
    if !(overhead >= 0.0) {
        return Err(Error::InvalidArgument(
            "overhead must be nonnegative".into(),
        ));
    }
    let mut jobs = Vec::new();
    for &b in batches {
        if b == 0 || b > data_size {
            return Err(Error::InvalidArgument(format!(
                "batch size {b} outside [1, {data_size}]"
            )));
        }
        for g in gammas.values_for(problem, b) {
            jobs.push((b, g));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Infeasible(
            "no step size within the stability margin".into(),
        ));
    }
    let risks: Vec<Result<(u64, f64, f64)>> = jobs
        .par_iter()
        .map(|&(b, g)| {
            Ok((
                b,
                g,
                exact_excess_risk_steps(problem, data_size / b, g, b, mode)?.total_excess,
            ))
        })
        .collect();

    let mut table: Vec<BatchRisk> = Vec::new();
    for r in risks {
        let (b, g, risk) = r?;
        match table.iter_mut().find(|e| e.batch == b) {
            Some(e) if risk < e.risk => {
                e.risk = risk;
                e.best_gamma = g;
            }
            Some(_) => {}
            None => table.push(BatchRisk {
                batch: b,
                best_gamma: g,
                risk,
            }),
        }
    }
    table.sort_by_key(|e| e.batch);
    let best_risk = table.iter().map(|e| e.risk).fold(f64::INFINITY, f64::min);
    let limit = (1.0 + overhead) * best_risk;
    let critical_batch = table
        .iter()
        .filter(|e| e.risk <= limit)
        .map(|e| e.batch)
        .max()
        .expect("the minimizing batch satisfies the limit");
    let idx = table
        .iter()
        .position(|e| e.batch == critical_batch)
        .expect("present");
    let interpolated_batch = match table.get(idx + 1) {
        Some(next) => {
            let lo = &table[idx];
            let t = (limit.ln() - lo.risk.ln()) / (next.risk.ln() - lo.risk.ln());
            ((lo.batch as f64).ln() + t * ((next.batch as f64).ln() - (lo.batch as f64).ln())).exp()
        }
        None => critical_batch as f64,
    };
    Ok(OracleCbs {
        critical_batch,
        interpolated_batch,
        best_risk,
        table,
    })
}

/// Ordinary least-squares slope and intercept of `ys` on `xs`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all abscissae identical".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbsScaling {
    /// `(D, grid B*, interpolated B*)`.
    pub points: Vec<(u64, u64, f64)>,
    /// Slope of log interpolated `B*` on `log D`.
    pub slope: f64,
    /// Slope of log grid `B*` on `log D`.
    pub grid_slope: f64,
}

/// Distinct integers `round(2^{k/per_octave})` from 1 up to `max`.
pub fn geometric_batches(max: u64, per_octave: u32) -> Vec<u64> {
    let mut out: Vec<u64> = (0..)
        .map(|k| 2f64.powf(k as f64 / per_octave.max(1) as f64).round() as u64)
        .take_while(|b| *b <= max)
        .collect();
    out.dedup();
    out
}

/// Runs [`oracle_cbs`] at every data size over [`geometric_batches`] up to
/// `D` and regresses `log B*` on `log D`.
pub fn oracle_cbs_scaling(
    problem: &SpectralProblem,
    data_sizes: &[u64],
    overhead: f64,
    batches_per_octave: u32,
    gammas: &GammaGrid,
    mode: MomentMode,
) -> Result<CbsScaling> {
    let mut points = Vec::with_capacity(data_sizes.len());
    for &d in data_sizes {
        let batches = geometric_batches(d, batches_per_octave);
        let r = oracle_cbs(problem, d, overhead, &batches, gammas, mode)?;
        points.push((d, r.critical_batch, r.interpolated_batch));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let grid: Vec<f64> = points.iter().map(|p| (p.1 as f64).ln()).collect();
    let interp: Vec<f64> = points.iter().map(|p| p.2.ln()).collect();
    let (slope, _) = ols(&xs, &interp)?;
    let (grid_slope, _) = ols(&xs, &grid)?;
    Ok(CbsScaling {
        points,
        slope,
        grid_slope,
    })
}

/// One row of the oracle CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    #[serde(rename = "D")]
    pub data_size: u64,
    #[serde(rename = "B")]
    pub batch: u64,
    pub gamma: f64,
    pub kstar: usize,
    pub bias: f64,
    pub variance: f64,
    pub total: f64,
    pub bound: f64,
}

pub fn oracle_row(
    problem: &SpectralProblem,
    data_size: u64,
    gamma: f64,
    batch: u64,
    mode: MomentMode,
) -> Result<OracleRow> {
    let r = exact_excess_risk(problem, data_size, gamma, batch, mode)?;
    Ok(OracleRow {
        data_size,
        batch,
        gamma,
        kstar: r.kstar,
        bias: r.bias,
        variance: r.variance,
        total: r.total_excess,
        bound: theorem2_bound(problem, data_size, gamma, batch),
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
