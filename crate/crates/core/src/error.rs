use std::path::PathBuf;

use crate::balance::BindingConstraint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("weights do not form a probability simplex (sum = {sum}, min = {min})")]
    NotSimplex { sum: f64, min: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt dataset {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("dimension mismatch: {0}")]
    Dims(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sample {0} carries no trajectory tensors")]
    MissingTrajectories(u64),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("non-finite gradient in parameter group `{group}` (first bad index {index})")]
    Gradient { group: String, index: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("infeasible balancing instance: {0}")]
    Infeasible(BindingConstraint),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::NonFinite(_) | Error::Gradient { .. } | Error::Diverged { .. } => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Data,
        }
    }
}
