use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how a caller should react: `Config*` errors mean
/// the request itself was invalid, `Data*` errors mean the inputs could not
/// support the request, and the rest are runtime failures.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {lhs:?}, right is {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("domain error in {op}: offending value {value}")]
    Domain { op: &'static str, value: f64 },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },

    #[error("invalid hyperparameter {name}: {value} ({reason})")]
    InvalidHyperParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class {class} has zero total count")]
    EmptyClass { class: usize },

    #[error("label {label} cannot reach {needed} positive samples: pool exhausted at {have}")]
    UnsatisfiableCoverage {
        label: usize,
        needed: usize,
        have: usize,
    },

    #[error("class {class} has too few samples for split {split}: need {need}, pool has {have}")]
    InsufficientClassSamples {
        class: String,
        split: &'static str,
        need: usize,
        have: usize,
    },

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("checkpoint version mismatch: file has {found}, this build is {expected}")]
    CheckpointVersion { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by an invalid request (bad config, bad
    /// hyperparameters) rather than by the data or the environment.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidHyperParam { .. } | Error::CheckpointVersion { .. }
        )
    }

    /// True for errors where the inputs cannot support the request.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::EmptyClass { .. }
                | Error::UnsatisfiableCoverage { .. }
                | Error::InsufficientClassSamples { .. }
                | Error::MalformedRow { .. }
                | Error::UndefinedMetric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
