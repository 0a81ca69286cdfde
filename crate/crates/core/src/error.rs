use thiserror::Error;

pub type Result<T, E = AtlasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Q is not positive semidefinite (min eigenvalue {min_eig:e}, symmetry defect {asym:e})")]
    NotPsd { min_eig: f64, asym: f64 },

    #[error("R is not positive definite (min eigenvalue {min_eig:e}, symmetry defect {asym:e})")]
    NotPd { min_eig: f64, asym: f64 },

    #[error("A is singular; the discrete-time Hamiltonian needs A^-T")]
    SingularA,

    #[error("wrong mode: {0}")]
    WrongMode(String),

    #[error("invalid discount: {0}")]
    InvalidDiscount(String),

    #[error("eigenvalue solver did not converge")]
    ConvergenceFailure,

    #[error("refusing to enumerate subspaces for n = {n} (cap is {cap})")]
    EnumerationCap { n: usize, cap: usize },

    #[error("no stabilizing Riccati solution")]
    NoStabilizingSolution,

    #[error("R + B^T P B is singular")]
    SingularRbpb,

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("{dropped} of {total} samples have running cost below {threshold:e}")]
    DegenerateCost { dropped: usize, total: usize, threshold: f64 },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
