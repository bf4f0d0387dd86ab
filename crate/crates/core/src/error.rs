use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("label {label} out of range for {classes} classes (batch index {index})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        index: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("design space has {size} architectures, above the enumeration cap of {cap}; sample instead")]
    SpaceTooLarge { size: u128, cap: u128 },

    #[error("latency table has no entry for searchable layer {layer}")]
    MissingLayer { layer: usize },

    #[error("architecture is inconsistent with the macro config: {0}")]
    InconsistentArchitecture(String),

    #[error("training diverged at step {step} (last finite loss: {last_finite:?})")]
    Diverged { step: usize, last_finite: Option<f64> },

    #[error("runtime window infeasible: acceptance rate {rate:.2e} after {draws} draws")]
    InfeasibleWindow { rate: f64, draws: usize },

    #[error("oracle mismatch: {0}")]
    OracleMismatch(String),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{path}: byte offset {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            dim,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
