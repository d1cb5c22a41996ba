use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: unknown level {level:?} for variable {variable:?}")]
    UnknownLevel {
        variable: String,
        level: String,
        row: usize,
    },

    #[error("row {row}: missing value for variable {variable:?}")]
    MissingVariable { variable: String, row: usize },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("nonpositive weight {weight} at row {row}")]
    NonpositiveWeight { weight: f64, row: usize },

    #[error("no non-missing responses for question {question}")]
    AllMissing { question: usize },

    #[error("empty sample: {0}")]
    EmptySample(&'static str),

    #[error("Newton-Raphson did not converge after {iterations} iterations (score norm {score_norm:e})")]
    NonConvergence { iterations: usize, score_norm: f64 },

    #[error("singular Hessian: the pooled design matrix is rank deficient")]
    SingularHessian,

    #[error("separation detected: the pseudo-likelihood score has no root ({0})")]
    Separation(String),

    #[error("nonpositive variance (v1 = {v1}, v2 = {v2})")]
    NonpositiveVariance { v1: f64, v2: f64 },

    #[error("unexpected estimate source: expected {expected}, found {found}")]
    SourceMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training set contains a single class")]
    SingleClass,

    #[error("feature schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("{failed} of {total} replicates failed (limit {limit_pct}%); first failure: {first}")]
    ReplicateFailures {
        failed: usize,
        total: usize,
        limit_pct: usize,
        first: String,
    },

    #[error("target {target} exceeds available {available}")]
    TargetTooLarge { target: usize, available: usize },

    #[error("stratum {0} is empty")]
    EmptyStratum(usize),

    #[error("invalid probability {0}")]
    InvalidProbability(f64),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
