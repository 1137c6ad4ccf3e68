//! Grid sweeps with deterministic seeds, resumable output and ordered writes.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::record::{self, spec_hash, Outcome, RunModule, RunRecord};
use crate::problem::ProblemSpec;
use crate::risk_oracle::{exact_excess_risk, MomentMode};
use crate::rng::derive_seed;
use crate::sgd_sim::{simulate_row, SgdConfig};
use crate::trainer::{self, TaskSpec, TrainOutcome, TrainReport, TrainerConfig};
use crate::{Error, Result};

/// What every grid point starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "module", rename_all = "snake_case")]
pub enum SweepBase {
    /// `config.target_loss` must be set.
    Trainer { config: TrainerConfig },
    SgdSim {
        problem: ProblemSpec,
        batch_size: u64,
        learning_rate: f64,
        data_size: u64,
    },
    RiskOracle {
        problem: ProblemSpec,
        batch_size: u64,
        learning_rate: f64,
        data_size: u64,
        #[serde(default)]
        mode: MomentMode,
    },
}

/// Axis values; an empty axis keeps the base value.
///
/// `model_size` sets the problem dimension, or the student width for the
/// teacher-student task. For trainer runs `data_size` sets `max_steps = D / B`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridAxes {
    pub model_size: Vec<u64>,
    pub data_size: Vec<u64>,
    pub batch_size: Vec<u64>,
    pub lr: Vec<f64>,
    pub ewa_decay: Vec<f64>,
    pub beta2: Vec<f64>,
}

pub const AXIS_NAMES: [&str; 6] = [
    "model_size",
    "data_size",
    "batch_size",
    "lr",
    "ewa_decay",
    "beta2",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub seed: u64,
    /// Independent seeds per grid point.
    #[serde(default = "one")]
    pub replicas: u32,
    /// Axes whose value is left out of the seed derivation, so their points
    /// share random streams.
    #[serde(default)]
    pub shared_seed_axes: Vec<String>,
    /// Record file; relative paths are resolved by the caller.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub base: SweepBase,
    #[serde(default)]
    pub grid: GridAxes,
}

fn one() -> u32 {
    1
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::InvalidArgument("replicas must be at least 1".into()));
        }
        for name in &self.shared_seed_axes {
            if !AXIS_NAMES.contains(&name.as_str()) {
                return Err(Error::InvalidArgument(format!("unknown axis {name:?}")));
            }
        }
        let g = &self.grid;
        check_unique("model_size", &g.model_size)?;
        check_unique("data_size", &g.data_size)?;
        check_unique("batch_size", &g.batch_size)?;
        check_unique("lr", &g.lr)?;
        check_unique("ewa_decay", &g.ewa_decay)?;
        check_unique("beta2", &g.beta2)?;
        if let SweepBase::Trainer { config } = &self.base {
            if config.target_loss.is_none() {
                return Err(Error::InvalidArgument(
                    "trainer sweeps need config.target_loss".into(),
                ));
            }
        } else if !g.ewa_decay.is_empty() || !g.beta2.is_empty() {
            return Err(Error::InvalidArgument(
                "ewa_decay and beta2 axes apply to trainer sweeps only".into(),
            ));
        }
        Ok(())
    }

    /// All runs in grid order: axes vary slowest-first in [`AXIS_NAMES`]
    /// order, then replicas.
    pub fn plan(&self) -> Result<Vec<PlannedRun>> {
        self.validate()?;
        let g = &self.grid;
        let opt = |v: &[u64]| -> Vec<Option<u64>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().copied().map(Some).collect()
            }
        };
        let optf = |v: &[f64]| -> Vec<Option<f64>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().copied().map(Some).collect()
            }
        };
        let mut out = Vec::new();
        for n in opt(&g.model_size) {
            for d in opt(&g.data_size) {
                for b in opt(&g.batch_size) {
                    for lr in optf(&g.lr) {
                        for tau in optf(&g.ewa_decay) {
                            for beta2 in optf(&g.beta2) {
                                for rep in 0..self.replicas {
                                    let point = Point {
                                        n,
                                        d,
                                        b,
                                        lr,
                                        tau,
                                        beta2,
                                        rep,
                                    };
                                    out.push(self.resolve(&point)?);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn seed_for(&self, p: &Point) -> u64 {
        let shared = |name: &str| self.shared_seed_axes.iter().any(|s| s == name);
        let mut labels = Vec::new();
        let mut push = |name: &str, v: Option<String>| {
            if let Some(v) = v {
                if !shared(name) {
                    labels.push(format!("{name}={v}"));
                }
            }
        };
        push("model_size", p.n.map(|x| x.to_string()));
        push("data_size", p.d.map(|x| x.to_string()));
        push("batch_size", p.b.map(|x| x.to_string()));
        push("lr", p.lr.map(|x| x.to_string()));
        push("ewa_decay", p.tau.map(|x| x.to_string()));
        push("beta2", p.beta2.map(|x| x.to_string()));
        labels.push(format!("replica={}", p.rep));
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        derive_seed(self.seed, &refs)
    }

    fn resolve(&self, p: &Point) -> Result<PlannedRun> {
        let seed = self.seed_for(p);
        let job = match &self.base {
            SweepBase::Trainer { config } => {
                let mut cfg = config.clone();
                cfg.seed = seed;
                if let Some(n) = p.n {
                    set_task_width(&mut cfg.task, n as usize);
                }
                if let Some(b) = p.b {
                    cfg.batch_size = b;
                }
                if let Some(d) = p.d {
                    cfg.max_steps = d / cfg.batch_size;
                }
                if let Some(lr) = p.lr {
                    cfg.peak_lr = lr;
                }
                if let Some(tau) = p.tau {
                    cfg.ewa_decay = tau;
                }
                if let Some(beta2) = p.beta2 {
                    cfg.optimizer.beta2 = beta2;
                }
                Job::Trainer(cfg)
            }
            SweepBase::SgdSim {
                problem,
                batch_size,
                learning_rate,
                data_size,
            } => {
                let mut problem = problem.clone();
                if let Some(n) = p.n {
                    problem.d = n as usize;
                }
                problem.seed = seed;
                Job::Sgd {
                    problem,
                    batch_size: p.b.unwrap_or(*batch_size),
                    learning_rate: p.lr.unwrap_or(*learning_rate),
                    data_size: p.d.unwrap_or(*data_size),
                }
            }
            SweepBase::RiskOracle {
                problem,
                batch_size,
                learning_rate,
                data_size,
                mode,
            } => {
                let mut problem = problem.clone();
                if let Some(n) = p.n {
                    problem.d = n as usize;
                }
                problem.seed = 0;
                Job::Oracle {
                    problem,
                    batch_size: p.b.unwrap_or(*batch_size),
                    learning_rate: p.lr.unwrap_or(*learning_rate),
                    data_size: p.d.unwrap_or(*data_size),
                    mode: *mode,
                }
            }
        };
        let coordinates = format!(
            "N={:?} D={:?} B={:?} lr={:?} tau={:?} beta2={:?} replica={}",
            p.n, p.d, p.b, p.lr, p.tau, p.beta2, p.rep
        );
        let run_id = spec_hash(&job)[..20].to_string();
        Ok(PlannedRun {
            run_id,
            coordinates,
            model_size: p.n.map(|n| n as f64),
            job,
        })
    }
}

fn set_task_width(task: &mut TaskSpec, n: usize) {
    match task {
        TaskSpec::LeastSquares { d, .. } => *d = n,
        TaskSpec::TeacherStudent { student_hidden, .. } => *student_hidden = n,
    }
}

fn check_unique<T: PartialEq + std::fmt::Debug>(name: &str, values: &[T]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(Error::InvalidArgument(format!(
                "duplicate {name} value {v:?}"
            )));
        }
    }
    Ok(())
}

struct Point {
    n: Option<u64>,
    d: Option<u64>,
    b: Option<u64>,
    lr: Option<f64>,
    tau: Option<f64>,
    beta2: Option<f64>,
    rep: u32,
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "module", rename_all = "snake_case")]
pub enum Job {
    Trainer(TrainerConfig),
    Sgd {
        problem: ProblemSpec,
        batch_size: u64,
        learning_rate: f64,
        data_size: u64,
    },
    Oracle {
        problem: ProblemSpec,
        batch_size: u64,
        learning_rate: f64,
        data_size: u64,
        mode: MomentMode,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    /// Hash of the resolved job, seed included.
    pub run_id: String,
    pub coordinates: String,
    pub model_size: Option<f64>,
    pub job: Job,
}

impl PlannedRun {
    pub fn execute(&self) -> Result<RunRecord> {
        let start = Instant::now();
        let mut rec = match &self.job {
            Job::Trainer(cfg) => trainer_record(cfg, &trainer::train(cfg)?),
            Job::Sgd {
                problem,
                batch_size,
                learning_rate,
                data_size,
            } => {
                let p = problem.build()?;
                let cfg = SgdConfig::new(*batch_size, *learning_rate, *data_size, problem.seed);
                let row = simulate_row(&p, &cfg)?;
                let outcome = match row.excess_risk {
                    Some(value) => Outcome::ExcessRisk { value },
                    None => Outcome::Diverged { step: None },
                };
                RunRecord {
                    run_id: String::new(),
                    module: RunModule::SgdSim,
                    spec_hash: spec_hash(&ProblemSpec {
                        seed: 0,
                        ..problem.clone()
                    }),
                    model_size: None,
                    data_size: Some(*data_size),
                    batch_size: *batch_size,
                    lr: *learning_rate,
                    ewa_decay: None,
                    beta2: None,
                    seed: problem.seed,
                    outcome,
                    wall_time_s: 0.0,
                }
            }
            Job::Oracle {
                problem,
                batch_size,
                learning_rate,
                data_size,
                mode,
            } => {
                let p = problem.build()?;
                let outcome =
                    match exact_excess_risk(&p, *data_size, *learning_rate, *batch_size, *mode) {
                        Ok(r) => Outcome::ExcessRisk {
                            value: r.total_excess,
                        },
                        Err(Error::Unstable { .. }) => Outcome::Diverged { step: None },
                        Err(e) => return Err(e),
                    };
                RunRecord {
                    run_id: String::new(),
                    module: RunModule::RiskOracle,
                    spec_hash: spec_hash(&(problem, mode)),
                    model_size: None,
                    data_size: Some(*data_size),
                    batch_size: *batch_size,
                    lr: *learning_rate,
                    ewa_decay: None,
                    beta2: None,
                    seed: 0,
                    outcome,
                    wall_time_s: 0.0,
                }
            }
        };
        rec.run_id = self.run_id.clone();
        rec.model_size = self.model_size;
        rec.wall_time_s = start.elapsed().as_secs_f64();
        Ok(rec)
    }
}

/// Record for a finished training run. The run id is the hash of the
/// configuration; wall time is left at zero.
pub fn trainer_record(cfg: &TrainerConfig, report: &TrainReport) -> RunRecord {
    let (outcome, steps) = match report.outcome {
        TrainOutcome::Reached { steps } => (Outcome::StepsToTarget { steps }, steps),
        TrainOutcome::NotReached => (Outcome::NotReached, cfg.max_steps),
        TrainOutcome::Diverged { step } => (Outcome::Diverged { step: Some(step) }, step),
    };
    RunRecord {
        run_id: spec_hash(&Job::Trainer(cfg.clone()))[..20].to_string(),
        module: RunModule::Trainer,
        spec_hash: spec_hash(&(&cfg.task, cfg.target_loss)),
        model_size: None,
        data_size: Some(steps * cfg.batch_size),
        batch_size: cfg.batch_size,
        lr: cfg.peak_lr,
        ewa_decay: Some(cfg.ewa_decay),
        beta2: Some(cfg.optimizer.beta2),
        seed: cfg.seed,
        outcome,
        wall_time_s: 0.0,
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
    /// Keep and skip runs already present in the output file. Without it an
    /// existing output file is truncated.
    pub resume: bool,
    /// Overrides the spec's output path.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub run_id: String,
    pub coordinates: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Every successful run in grid order, including resumed ones.
    pub records: Vec<RunRecord>,
    pub executed: usize,
    pub skipped: usize,
    pub failures: Vec<SweepFailure>,
}

/// Runs every grid point not already recorded. Records are appended to the
/// output file in grid order by a single writer; a failing point is reported
/// in [`SweepOutcome::failures`] and does not stop the others.
pub fn run_sweep(spec: &SweepSpec, opts: &SweepOptions) -> Result<SweepOutcome> {
    let plan = spec.plan()?;
    let output = opts.output.clone().or_else(|| spec.output.clone());

    let mut previous = Vec::new();
    if let Some(path) = &output {
        if opts.resume && path.exists() {
            previous = record::read_jsonl(path)?;
        }
    }
    let done: HashSet<String> = record::completed_ids(&previous);
    let pending: Vec<&PlannedRun> = plan.iter().filter(|r| !done.contains(&r.run_id)).collect();
    let skipped = plan.len() - pending.len();

    let mut sink = match &output {
        Some(path) => Some(open_output(path, opts.resume)?),
        None => None,
    };

    let threads = opts.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let mut fresh: Vec<RunRecord> = Vec::new();
    let mut failures = Vec::new();
    let mut write_error = None;
    let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
    std::thread::scope(|scope| {
        let pending = &pending;
        scope.spawn(move || {
            pool.install(|| {
                pending
                    .par_iter()
                    .enumerate()
                    .for_each_with(tx, |tx, (i, run)| {
                        let _ = tx.send((i, run.execute()));
                    });
            });
        });
        let mut buffer = BTreeMap::new();
        let mut next = 0;
        for (i, result) in rx {
            buffer.insert(i, result);
            while let Some(result) = buffer.remove(&next) {
                let run = pending[next];
                next += 1;
                match result {
                    Ok(rec) => {
                        if let (Some((path, file)), None) = (sink.as_mut(), write_error.as_ref()) {
                            if let Err(e) = writeln!(file, "{}", record::to_json_line(&rec))
                                .and_then(|_| file.flush())
                            {
                                write_error = Some(Error::io(path.clone(), e));
                            }
                        }
                        fresh.push(rec);
                    }
                    Err(e) => {
                        log::warn!("run {} ({}) failed: {e}", run.run_id, run.coordinates);
                        failures.push(SweepFailure {
                            run_id: run.run_id.clone(),
                            coordinates: run.coordinates.clone(),
                            message: e.to_string(),
                        });
                    }
                }
            }
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }

    let executed = fresh.len() + failures.len();
    let mut by_id: std::collections::HashMap<String, RunRecord> = previous
        .into_iter()
        .chain(fresh)
        .map(|r| (r.run_id.clone(), r))
        .collect();
    let records = plan
        .iter()
        .filter_map(|r| by_id.remove(&r.run_id))
        .collect();
    Ok(SweepOutcome {
        records,
        executed,
        skipped,
        failures,
    })
}

fn open_output(path: &Path, resume: bool) -> Result<(PathBuf, std::fs::File)> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = if resume {
        OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
    } else {
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    if resume {
        // Drop a partial final line left by an interrupted append.
        let mut text = Vec::new();
        file.read_to_end(&mut text)
            .map_err(|e| Error::io(path, e))?;
        if text.last().is_some_and(|&c| c != b'\n') {
            let keep = text.iter().rposition(|&c| c == b'\n').map_or(0, |i| i + 1);
            file.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok((path.to_path_buf(), file))
}
