use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedHelpError>;

#[derive(Debug, Error)]
pub enum FedHelpError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("oracle cache miss for datum {datum_id}")]
    CacheMiss { datum_id: u64 },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("format error in {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("round {round}, client {client}: {source}")]
    Round {
        round: usize,
        client: usize,
        #[source]
        source: Box<FedHelpError>,
    },

    #[error("run directory {0} is missing or incomplete")]
    MissingRun(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FedHelpError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FedHelpError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        FedHelpError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        FedHelpError::Format {
            what,
            reason: reason.into(),
        }
    }
}
