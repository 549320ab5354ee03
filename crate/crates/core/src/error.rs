use thiserror::Error;

#[derive(Debug, Error)]
pub enum QbmError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("grid overflow: {0}")]
    GridOverflow(String),

    #[error(
        "noise covariance is not positive semidefinite: min eigenvalue {min_eigenvalue:.3e} \
         below tolerance {tolerance:.3e}"
    )]
    Factorization { min_eigenvalue: f64, tolerance: f64 },

    #[error("trajectory {trajectory} diverged at step {step} (norm² history tail {norm_history:?})")]
    TrajectoryDiverged {
        trajectory: u64,
        step: usize,
        norm_history: Vec<f64>,
    },

    #[error("{failed} of {total} trajectories aborted (limit 1%); first failure: {first}")]
    EnsembleFailure {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("density matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("trace drift {drift:.3e} persisted after {halvings} step halvings at t = {t}")]
    TraceDrift { drift: f64, halvings: usize, t: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QbmError>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> QbmError {
    QbmError::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}
