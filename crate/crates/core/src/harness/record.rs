//! Run records and their line-delimited JSON and CSV forms.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunModule {
    SgdSim,
    Trainer,
    RiskOracle,
}

impl RunModule {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunModule::SgdSim => "sgd_sim",
            RunModule::Trainer => "trainer",
            RunModule::RiskOracle => "risk_oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    StepsToTarget { steps: u64 },
    ExcessRisk { value: f64 },
    Diverged { step: Option<u64> },
    NotReached,
}

impl Outcome {
    pub fn steps(&self) -> Option<u64> {
        match self {
            Outcome::StepsToTarget { steps } => Some(*steps),
            _ => None,
        }
    }

    pub fn excess_risk(&self) -> Option<f64> {
        match self {
            Outcome::ExcessRisk { value } => Some(*value),
            _ => None,
        }
    }
}

/// One executed grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub module: RunModule,
    /// Hash of the task or problem definition shared by comparable runs.
    pub spec_hash: String,
    /// Model-size label `N`.
    pub model_size: Option<f64>,
    /// Data budget `D` in samples.
    pub data_size: Option<u64>,
    pub batch_size: u64,
    /// Learning rate, or `γ` for SGD runs.
    pub lr: f64,
    pub ewa_decay: Option<f64>,
    pub beta2: Option<f64>,
    pub seed: u64,
    pub outcome: Outcome,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// Equality ignoring wall time.
    pub fn same_content(&self, other: &RunRecord) -> bool {
        RunRecord {
            wall_time_s: 0.0,
            ..self.clone()
        } == RunRecord {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Hex sha256 of the JSON encoding of `value`.
pub fn spec_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("spec serializes to JSON");
    hex::encode(Sha256::digest(&bytes))
}

pub fn to_json_line(record: &RunRecord) -> String {
    serde_json::to_string(record).expect("record serializes")
}

pub fn from_json_line(line: &str) -> Result<RunRecord> {
    Ok(serde_json::from_str(line)?)
}

/// Reads a line-delimited record file, skipping blank lines. A malformed
/// final line (an interrupted append) is dropped with a warning; malformed
/// lines elsewhere are errors.
pub fn read_jsonl(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match from_json_line(line) {
            Ok(r) => out.push(r),
            Err(e) if Some(i) == last => {
                log::warn!("{}: dropping truncated final line: {e}", path.display());
            }
            Err(e) => return Err(Error::Parse(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

pub fn completed_ids(records: &[RunRecord]) -> HashSet<String> {
    records.iter().map(|r| r.run_id.clone()).collect()
}

pub fn write_jsonl(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", to_json_line(r)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Flat CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlatRecord {
    run_id: String,
    module: RunModule,
    spec_hash: String,
    model_size: Option<f64>,
    data_size: Option<u64>,
    batch_size: u64,
    lr: f64,
    ewa_decay: Option<f64>,
    beta2: Option<f64>,
    seed: u64,
    outcome: String,
    steps: Option<u64>,
    excess_risk: Option<f64>,
    diverged_step: Option<u64>,
    wall_time_s: f64,
}

impl From<&RunRecord> for FlatRecord {
    fn from(r: &RunRecord) -> Self {
        let (outcome, steps, excess_risk, diverged_step) = match r.outcome {
            Outcome::StepsToTarget { steps } => ("steps_to_target", Some(steps), None, None),
            Outcome::ExcessRisk { value } => ("excess_risk", None, Some(value), None),
            Outcome::Diverged { step } => ("diverged", None, None, step),
            Outcome::NotReached => ("not_reached", None, None, None),
        };
        FlatRecord {
            run_id: r.run_id.clone(),
            module: r.module,
            spec_hash: r.spec_hash.clone(),
            model_size: r.model_size,
            data_size: r.data_size,
            batch_size: r.batch_size,
            lr: r.lr,
            ewa_decay: r.ewa_decay,
            beta2: r.beta2,
            seed: r.seed,
            outcome: outcome.into(),
            steps,
            excess_risk,
            diverged_step,
            wall_time_s: r.wall_time_s,
        }
    }
}

impl TryFrom<FlatRecord> for RunRecord {
    type Error = Error;

    fn try_from(f: FlatRecord) -> Result<Self> {
        let missing = |what: &str| {
            Error::Parse(format!(
                "run {}: {} outcome without {what}",
                f.run_id, f.outcome
            ))
        };
        let outcome = match f.outcome.as_str() {
            "steps_to_target" => Outcome::StepsToTarget {
                steps: f.steps.ok_or_else(|| missing("steps"))?,
            },
            "excess_risk" => Outcome::ExcessRisk {
                value: f.excess_risk.ok_or_else(|| missing("excess_risk"))?,
            },
            "diverged" => Outcome::Diverged {
                step: f.diverged_step,
            },
            "not_reached" => Outcome::NotReached,
            other => return Err(Error::Parse(format!("unknown outcome {other:?}"))),
        };
        Ok(RunRecord {
            run_id: f.run_id,
            module: f.module,
            spec_hash: f.spec_hash,
            model_size: f.model_size,
            data_size: f.data_size,
            batch_size: f.batch_size,
            lr: f.lr,
            ewa_decay: f.ewa_decay,
            beta2: f.beta2,
            seed: f.seed,
            outcome,
            wall_time_s: f.wall_time_s,
        })
    }
}

pub fn write_records_csv<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record([
        "run_id",
        "module",
        "spec_hash",
        "model_size",
        "data_size",
        "batch_size",
        "lr",
        "ewa_decay",
        "beta2",
        "seed",
        "outcome",
        "steps",
        "excess_risk",
        "diverged_step",
        "wall_time_s",
    ])?;
    for r in records {
        w.serialize(FlatRecord::from(r))?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    rd.deserialize::<FlatRecord>()
        .map(|row| RunRecord::try_from(row?))
        .collect()
}
