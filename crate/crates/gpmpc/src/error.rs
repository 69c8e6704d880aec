use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix is not positive definite even after the jitter escalation.
    #[error("matrix not positive definite (last jitter tried: {last_jitter:.3e})")]
    NotPositiveDefinite { last_jitter: f64 },

    /// Symmetry check failed on an input that must be symmetric.
    #[error("matrix not symmetric within tolerance (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },

    /// Incompatible dimensions between operands.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Objective or gradient returned a non-finite value that backtracking
    /// could not step away from.
    #[error("non-finite objective or gradient during optimization")]
    NonFiniteObjective,

    /// A numerical quantity that must be finite was not.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An argument was outside its valid range.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// No data where at least one point/row was required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Every optimizer restart failed.
    #[error("all {0} fit restarts failed")]
    AllRestartsFailed(usize),

    /// The OCP solver produced a non-finite iterate.
    #[error("OCP solver diverged: {0}")]
    SolverDiverged(String),

    /// Configuration file problem (parse error or invalid field value).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
