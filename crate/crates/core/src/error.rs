use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("state became non-finite at step {step}")]
    Divergence { step: usize },

    #[error("equality constraints are infeasible (least-squares residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error("quadratic program is unbounded below along a feasible direction (curvature {curvature:e})")]
    Unbounded { curvature: f64 },

    #[error("Riccati recursion ill-posed at step {step}: Sigma is numerically singular")]
    IllPosed { step: usize },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("trajectory too short: need at least {required} samples, got {got}")]
    TooShort { required: usize, got: usize },

    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("setup mismatch: {0}")]
    Mismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("diagnostic check failed: {0}")]
    Diagnostic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 config, 2 numerical, 3 diagnostic.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingFile(_) | Error::Io(_) | Error::Json(_) => 1,
            Error::Diagnostic(_) => 3,
            Error::Controller { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
