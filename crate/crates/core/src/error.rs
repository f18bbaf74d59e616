use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch{}: expected {expected}, found {found}", at_record(.record))]
    DimensionMismatch {
        expected: usize,
        found: usize,
        record: Option<usize>,
    },

    #[error("non-finite value in record {record}")]
    NonFinite { record: usize },

    #[error("label {label} out of range for {num_classes} classes (record {record})")]
    LabelOutOfRange {
        record: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("statistics have not been initialized")]
    Uninitialized,

    #[error("{0} requires a background slot but the layout has none")]
    MissingBackground(&'static str),

    #[error("{name} = {value} violates {bound}")]
    Domain {
        name: &'static str,
        value: f64,
        bound: &'static str,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("class {class} would receive {count} samples; every class needs at least one")]
    InfeasibleCounts { class: usize, count: i64 },

    #[error("class {class} has zero count")]
    ZeroCount { class: usize },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("row {row} of the score matrix sums to {sum}, not 1")]
    NotProbabilities { row: usize, sum: f64 },

    #[error("no positive proposals for any foreground class")]
    NoPositives,

    #[error("need at least 3 classes, found {0}")]
    TooFewClasses(usize),

    #[error("malformed dump: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn at_record(record: &Option<usize>) -> String {
    match record {
        Some(i) => format!(" in record {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
