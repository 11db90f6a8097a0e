use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

use crate::domain::HospitalLevel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: field `{field}`: {message}")]
    Parse {
        file: String,
        line: u64,
        field: String,
        message: String,
    },

    #[error("required file not found: {0}")]
    MissingFile(PathBuf),

    #[error("missing artifact {0}; run the stage that produces it first")]
    MissingArtifact(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("dataset is empty after exclusions")]
    EmptyDataset,

    #[error("date {0} is outside the calendar coverage")]
    CalendarCoverage(NaiveDate),

    #[error("region `{0}` has no physician density entry")]
    UnknownRegion(String),

    #[error("unknown {kind} `{id}`")]
    UnknownReference { kind: &'static str, id: String },

    #[error("visit sequence is empty")]
    EmptySequence,

    #[error("class {0:?} has no rows in the training data")]
    ClassAbsent(HospitalLevel),

    #[error("cannot make {folds} folds from {rows} rows")]
    TooFewRows { rows: usize, folds: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{features} features exceed the exact Shapley limit of {limit}")]
    ExactLimit { features: usize, limit: usize },

    #[error("label/prediction length mismatch: {labels} vs {predictions}")]
    LengthMismatch { labels: usize, predictions: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
