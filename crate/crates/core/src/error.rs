use std::path::PathBuf;

use crate::solvers::SolverReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("row {row}, column `{column}`: `{value}` is not a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operation not supported for this task: {0}")]
    UnsupportedTask(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("further-training run diverged (loo: {loo}, seed: {seed}, step: {step})")]
    RunDiverged { loo: String, seed: u64, step: usize },

    #[error("solver diverged after {} iterations (residual {:.3e})", .0.iterations, .0.residual_norm)]
    SolverDiverged(Box<SolverReport>),

    #[error("rank-deficient system ({0})")]
    RankDeficient(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("attribution methods failed: {message}")]
    MethodsFailed { numerical: bool, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (divergence, singular systems),
    /// as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::RunDiverged { .. }
                | Error::SolverDiverged(_)
                | Error::RankDeficient(_)
                | Error::MethodsFailed { numerical: true, .. }
        )
    }
}
