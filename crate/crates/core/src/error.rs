use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle too close to pi for the log chart (trace = {trace})")]
    AngleNearPi { trace: f64 },

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfDomain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("mass matrix ill-conditioned (estimated condition {condition:.3e})")]
    SolverSingular { condition: f64 },

    #[error("trajectory needs at least {needed} rows, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("evaluation set is empty")]
    EmptyEval,

    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("{path}: format error at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::OutOfDomain { .. }
                | Error::EmptyEval
                | Error::ShapeMismatch { .. }
                | Error::Config(_)
                | Error::TooShort { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
