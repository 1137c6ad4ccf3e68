use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("data size {data_size} is not divisible by batch size {batch_size}")]
    NotDivisible { data_size: u64, batch_size: u64 },

    #[error("iterate diverged at step {step}")]
    Diverged { step: u64 },

    #[error("{diverged} of {reps} replicas diverged (first at step {first_step})")]
    ReplicasDiverged {
        diverged: usize,
        reps: usize,
        first_step: u64,
    },

    #[error("learning rate {gamma} outside the stability region (max {gamma_max})")]
    Unstable { gamma: f64, gamma_max: f64 },

    #[error("compute budget exceeded: {cost} > {budget}")]
    BudgetExceeded { cost: u128, budget: u128 },

    #[error("too few observations: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("no root of the overhead equation in [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },

    #[error("no feasible grid point: {0}")]
    Infeasible(String),

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("reference batch size {0} not present")]
    MissingReference(u64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
