use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("N must be even and ≥ 8 (got {0})")]
    InvalidGridSize(usize),

    #[error("u must be positive at every node (u[{index}] = {value})")]
    NonPositive { index: usize, value: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite integrand value at midpoint {index} (theta = {theta}, u = {u}, p = {p})")]
    NonFinite {
        index: usize,
        theta: f64,
        u: f64,
        p: f64,
    },

    #[error("unknown functional `{0}`")]
    UnknownFunctional(String),

    #[error("invalid parameter for `{functional}`: {message}")]
    InvalidParameter { functional: String, message: String },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("infeasible input: {0}")]
    Infeasible(String),

    #[error("probe rejected: {0}")]
    ProbeRejected(String),

    #[error("not strongly concave on R: {0}")]
    NotStronglyConcave(String),

    #[error("all {0} multistart replicas failed to converge")]
    AllReplicasFailed(usize),

    #[error("malformed CSV at line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
