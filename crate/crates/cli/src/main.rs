//! `cbslab`: command line front end for the critical-batch-size lab.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cbs_lab::cbs_fit::{
    self, chinchilla_steps, critical_batch, critical_points, fit_cbs_law, fit_step_law, forecast,
    AlphaMode, CbsLawFit, ScaleKind, StepObservation, CHINCHILLA_RATIO, CONTEXT_LENGTH,
    DEFAULT_OVERHEAD,
};
use cbs_lab::harness::{self, ReportInput, SweepOptions, SweepSpec};
use cbs_lab::problem::{ProblemSpec, SpectralProblem};
use cbs_lab::risk_oracle::{oracle_row, stability_margin, MomentMode};
use cbs_lab::sgd_sim::{simulate_row, SgdConfig};
use cbs_lab::trainer::{self, TrainerConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "cbslab",
    version,
    about = "Critical batch size experiments: oracle, simulator, trainer and fitting"
)]
struct Cli {
    /// Directory for output files.
    #[arg(
        long,
        global = true,
        env = "CBS_LAB_OUT_DIR",
        default_value = "cbslab-out"
    )]
    out: PathBuf,

    /// Overrides the seed of the config or command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo mini-batch SGD replicas.
    Simulate(SimulateArgs),
    /// Exact excess risk and bound over (D, B, gamma) grids.
    Oracle(OracleArgs),
    /// Run a grid sweep from a TOML spec.
    Sweep(SweepArgs),
    /// Train one configuration from a TOML file.
    Train(TrainArgs),
    /// Fit the step law and solve for the critical batch size.
    FitSteps(FitStepsArgs),
    /// Fit the critical-batch-size scaling law across scales.
    FitCbs(FitCbsArgs),
    /// Evaluate a critical-batch-size law at new scales.
    Forecast(ForecastArgs),
    /// Steps for a compute-optimal token budget.
    ChinchillaSteps(ChinchillaArgs),
    /// Aggregate run records into report tables and charts.
    Report(ReportArgs),
}

#[derive(Args)]
struct ProblemArgs {
    /// TOML problem file with d, a, b, sigma2 and optional seed.
    #[arg(long, conflicts_with_all = ["d", "a", "b", "sigma2"])]
    problem: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 2.0)]
    a: f64,
    #[arg(long, default_value_t = 3.0)]
    b: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
}

impl ProblemArgs {
    fn load(&self) -> Result<ProblemSpec, String> {
        match &self.problem {
            Some(path) => Ok(ProblemSpec::from_toml(&read(path)?).map_err(|e| e.to_string())?),
            None => Ok(ProblemSpec {
                d: self.d,
                a: self.a,
                b: self.b,
                sigma2: self.sigma2,
                seed: 0,
            }),
        }
    }
}

/// Either an absolute step size or a fraction of the stability margin.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct GammaArgs {
    /// Step sizes.
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    /// Step sizes as fractions of the stability margin at each batch size.
    #[arg(long, value_delimiter = ',')]
    gamma_fraction: Vec<f64>,
}

impl GammaArgs {
    fn resolve(&self, p: &SpectralProblem, batch: u64) -> Vec<f64> {
        if self.gamma.is_empty() {
            let m = stability_margin(p, batch);
            self.gamma_fraction.iter().map(|f| f * m).collect()
        } else {
            self.gamma.clone()
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    batch: u64,
    #[command(flatten)]
    gamma: GammaArgs,
    #[arg(long)]
    data_size: u64,
    /// Replicas; replica k uses seed + k.
    #[arg(long, default_value_t = 1)]
    reps: u64,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    data_size: Vec<u64>,
    #[arg(long, value_delimiter = ',', required = true)]
    batch: Vec<u64>,
    #[command(flatten)]
    gamma: GammaArgs,
    #[arg(long, default_value = "exact-gaussian")]
    mode: MomentMode,
}

#[derive(Args)]
struct SweepArgs {
    spec: PathBuf,
    /// Skip runs already present in the output file.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaArg {
    Fixed,
    Free,
}

impl From<AlphaArg> for AlphaMode {
    fn from(a: AlphaArg) -> Self {
        match a {
            AlphaArg::Fixed => AlphaMode::FixedOne,
            AlphaArg::Free => AlphaMode::Free,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    /// Model size in millions of parameters.
    Model,
    /// Training tokens, in whatever unit the input uses.
    Tokens,
}

impl From<ScaleArg> for ScaleKind {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Model => ScaleKind::ModelSizeMillions,
            ScaleArg::Tokens => ScaleKind::Tokens,
        }
    }
}

#[derive(Args)]
struct CriticalArgs {
    /// Reference (optimal) batch size.
    #[arg(long)]
    b_opt: f64,
    /// Allowed step overhead relative to linear scaling.
    #[arg(long, default_value_t = DEFAULT_OVERHEAD)]
    overhead: f64,
    #[arg(long, value_enum, default_value = "fixed")]
    alpha: AlphaArg,
}

#[derive(Args)]
struct FitStepsArgs {
    /// Observation CSV (scale_n_millions, scale_d_tokens, batch, steps).
    observations: PathBuf,
    #[command(flatten)]
    critical: CriticalArgs,
}

#[derive(Args)]
struct FitCbsArgs {
    /// Observation CSV, fitted per scale; or with --points, a CSV of
    /// (scale, critical_batch).
    input: PathBuf,
    #[arg(long)]
    points: bool,
    #[arg(long, value_enum, default_value = "model")]
    scale: ScaleArg,
    /// Fit the additive constant instead of fixing it at zero.
    #[arg(long)]
    free_constant: bool,
    #[arg(long)]
    b_opt: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_OVERHEAD)]
    overhead: f64,
    #[arg(long, value_enum, default_value = "fixed")]
    alpha: AlphaArg,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    coefficient: f64,
    #[arg(long)]
    exponent: f64,
    #[arg(long, default_value_t = 0.0)]
    constant: f64,
    #[arg(long, value_enum, default_value = "model")]
    scale: ScaleArg,
    /// Scales to evaluate: millions of parameters, or tokens in the unit the law was fitted in.
    #[arg(long = "at", value_delimiter = ',', required = true)]
    at: Vec<f64>,
}

#[derive(Args)]
struct ChinchillaArgs {
    /// Model sizes in millions of parameters.
    #[arg(long, value_delimiter = ',', required = true)]
    params_millions: Vec<f64>,
    #[arg(long, default_value_t = 256)]
    batch: u64,
    #[arg(long, default_value_t = CONTEXT_LENGTH)]
    context_length: u64,
    #[arg(long, default_value_t = CHINCHILLA_RATIO)]
    ratio: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Line-delimited JSON run records.
    records: PathBuf,
    /// Reference batch for relative steps (default: smallest batch).
    #[arg(long)]
    reference_batch: Option<u64>,
    /// Average seeds per setting before taking the best per batch size.
    #[arg(long)]
    seed_mean: bool,
    /// Also fit the step law and solve for the critical batch at this B_opt.
    #[arg(long)]
    b_opt: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_OVERHEAD)]
    overhead: f64,
    #[arg(long, value_enum, default_value = "fixed")]
    alpha: AlphaArg,
    /// Write a log-log SVG chart of steps against batch size.
    #[arg(long)]
    svg: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

type CmdResult = Result<ExitCode, String>;

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Oracle(a) => oracle(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Train(a) => train(cli, a),
        Command::FitSteps(a) => fit_steps(cli, a),
        Command::FitCbs(a) => fit_cbs(cli, a),
        Command::Forecast(a) => forecast_cmd(cli, a),
        Command::ChinchillaSteps(a) => chinchilla(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn out_file(cli: &Cli, name: &str) -> Result<PathBuf, String> {
    fs::create_dir_all(&cli.out).map_err(|e| format!("{}: {e}", cli.out.display()))?;
    Ok(cli.out.join(name))
}

fn write_json<T: Serialize>(cli: &Cli, name: &str, value: &T) -> Result<PathBuf, String> {
    let path = out_file(cli, name)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    fs::write(&path, format!("{text}\n")).map_err(|e| format!("{}: {e}", path.display()))?;
    println!("{text}");
    Ok(path)
}

fn write_csv<T: Serialize>(cli: &Cli, name: &str, rows: &[T]) -> Result<PathBuf, String> {
    let path = out_file(cli, name)?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())?;
    Ok(path)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> CmdResult {
    let spec = a.problem.load()?;
    let p = spec.build().map_err(err)?;
    let seed = cli.seed.unwrap_or(spec.seed);
    let mut rows = Vec::new();
    for gamma in a.gamma.resolve(&p, a.batch) {
        for k in 0..a.reps {
            let cfg = SgdConfig::new(a.batch, gamma, a.data_size, seed.wrapping_add(k));
            rows.push(simulate_row(&p, &cfg).map_err(err)?);
        }
    }
    let path = write_csv(cli, "simulate.csv", &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn oracle(cli: &Cli, a: &OracleArgs) -> CmdResult {
    let p = a.problem.load()?.build().map_err(err)?;
    let mut rows = Vec::new();
    for &d in &a.data_size {
        for &b in &a.batch {
            for gamma in a.gamma.resolve(&p, b) {
                match oracle_row(&p, d, gamma, b, a.mode) {
                    Ok(r) => rows.push(r),
                    Err(e) => eprintln!("skipping D={d} B={b} gamma={gamma}: {e}"),
                }
            }
        }
    }
    let path = write_csv(cli, "oracle.csv", &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> CmdResult {
    let mut spec = SweepSpec::from_toml(&read(&a.spec)?).map_err(err)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let output = match &spec.output {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => out_file(cli, "")?.join(p),
        None => out_file(cli, "runs.jsonl")?,
    };
    let opts = SweepOptions {
        jobs: cli.jobs,
        resume: a.resume,
        output: Some(output.clone()),
    };
    let out = harness::run_sweep(&spec, &opts).map_err(err)?;
    eprintln!(
        "{} runs executed, {} skipped, {} failed; records in {}",
        out.executed,
        out.skipped,
        out.failures.len(),
        output.display()
    );
    for f in &out.failures {
        eprintln!("failed {} ({}): {}", f.run_id, f.coordinates, f.message);
    }
    Ok(if out.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut cfg = TrainerConfig::from_toml(&read(&a.config)?).map_err(err)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let start = Instant::now();
    let report = trainer::train(&cfg).map_err(err)?;
    let mut record = harness::trainer_record(&cfg, &report);
    record.wall_time_s = start.elapsed().as_secs_f64();
    let path = write_csv(cli, "evals.csv", &report.evals)?;
    eprintln!(
        "wrote {} evaluation points to {}",
        report.evals.len(),
        path.display()
    );
    let line = harness::to_json_line(&record);
    let runs = out_file(cli, "runs.jsonl")?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&runs)
        .map_err(|e| format!("{}: {e}", runs.display()))?;
    writeln!(f, "{line}").map_err(|e| format!("{}: {e}", runs.display()))?;
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

fn load_observations(path: &Path) -> Result<Vec<StepObservation>, String> {
    let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    cbs_fit::read_observations(f).map_err(err)
}

#[derive(Serialize)]
struct StepsReport {
    fit: cbs_fit::StepLawFit,
    b_opt: f64,
    overhead: f64,
    critical: cbs_fit::CriticalBatch,
    observations: usize,
}

fn fit_steps(cli: &Cli, a: &FitStepsArgs) -> CmdResult {
    let obs = load_observations(&a.observations)?;
    let fit = fit_step_law(&obs, a.critical.alpha.into()).map_err(err)?;
    let critical = critical_batch(&fit, a.critical.b_opt, a.critical.overhead).map_err(err)?;
    write_json(
        cli,
        "fit_steps.json",
        &StepsReport {
            fit,
            b_opt: a.critical.b_opt,
            overhead: a.critical.overhead,
            critical,
            observations: obs.len(),
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, serde::Deserialize)]
struct PointRow {
    scale: f64,
    critical_batch: f64,
}

#[derive(Serialize)]
struct CbsReport {
    points: Vec<PointRow>,
    per_scale: Vec<cbs_fit::ScalePoint>,
    fit: CbsLawFit,
}

fn fit_cbs(cli: &Cli, a: &FitCbsArgs) -> CmdResult {
    let kind: ScaleKind = a.scale.into();
    let (points, per_scale) = if a.points {
        let mut rd =
            csv::Reader::from_path(&a.input).map_err(|e| format!("{}: {e}", a.input.display()))?;
        let rows: Vec<PointRow> = rd.deserialize().collect::<Result<_, _>>().map_err(err)?;
        (rows, Vec::new())
    } else {
        let b_opt = a
            .b_opt
            .ok_or("--b-opt is required when fitting from observations")?;
        let obs = load_observations(&a.input)?;
        let per = critical_points(&obs, kind, a.alpha.into(), b_opt, a.overhead).map_err(err)?;
        let rows = per
            .iter()
            .map(|p| PointRow {
                scale: p.scale,
                critical_batch: p.critical.batch,
            })
            .collect();
        (rows, per)
    };
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.scale, p.critical_batch)).collect();
    let fit = fit_cbs_law(&pairs, !a.free_constant, kind).map_err(err)?;
    let input = ReportInput {
        cbs_points: pairs,
        cbs_fit: Some(fit.clone()),
        ..Default::default()
    };
    harness::emit_report(&input, &cli.out).map_err(err)?;
    write_json(
        cli,
        "fit_cbs.json",
        &CbsReport {
            points,
            per_scale,
            fit,
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ForecastRow {
    scale: f64,
    critical_batch: f64,
}

fn forecast_cmd(cli: &Cli, a: &ForecastArgs) -> CmdResult {
    let law = CbsLawFit::new(a.constant, a.coefficient, a.exponent, a.scale.into());
    let rows: Vec<ForecastRow> =
        a.at.iter()
            .map(|&s| ForecastRow {
                scale: s,
                critical_batch: forecast(&law, s),
            })
            .collect();
    write_json(cli, "forecast.json", &rows)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ChinchillaRow {
    params_millions: f64,
    batch: u64,
    steps: u64,
}

fn chinchilla(cli: &Cli, a: &ChinchillaArgs) -> CmdResult {
    let rows = a
        .params_millions
        .iter()
        .map(|&n| {
            Ok(ChinchillaRow {
                params_millions: n,
                batch: a.batch,
                steps: chinchilla_steps(n * 1e6, a.batch, a.context_length, a.ratio)
                    .map_err(err)?,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    write_json(cli, "chinchilla_steps.json", &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn report(cli: &Cli, a: &ReportArgs) -> CmdResult {
    let records = harness::read_jsonl(&a.records).map_err(err)?;
    let observations = if records.is_empty() {
        Vec::new()
    } else if a.seed_mean {
        harness::best_mean_per_batch(&records).map_err(err)?
    } else {
        harness::best_per_batch(&records).map_err(err)?
    };
    let mut input = ReportInput {
        records,
        observations,
        reference_batch: a.reference_batch,
        svg: a.svg,
        ..Default::default()
    };
    if let Some(b_opt) = a.b_opt {
        let fit = fit_step_law(&input.observations, a.alpha.into()).map_err(err)?;
        input.critical = Some(critical_batch(&fit, b_opt, a.overhead).map_err(err)?);
        input.step_fit = Some(fit);
    }
    let files = harness::emit_report(&input, &cli.out).map_err(err)?;
    print!("{}", harness::summary(&input));
    io::stdout().flush().map_err(err)?;
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}
