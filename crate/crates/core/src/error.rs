use thiserror::Error;

/// Errors raised by the numerical core and the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dual norm requires Dirichlet Laplacian")]
    DualNormRequiresDirichlet,

    #[error("inner product is not defined for norm kind {0}")]
    NotAnInnerProduct(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("blow-up at step {step}: norm {norm:e} exceeds guard radius")]
    BlowUp { step: usize, norm: f64 },

    #[error("dissipativity violated: effective gap {gap} <= 0")]
    DissipativityViolated { gap: f64 },

    #[error("averaged coefficient did not converge: replica standard error {se:e} > tolerance {tol:e}")]
    NonConvergence { se: f64, tol: f64 },

    #[error("event infeasible at largest epsilon: {hits} hits out of {n_paths} paths")]
    InfeasibleEvent { hits: u64, n_paths: u64 },

    #[error("Jacobian unavailable: {0}")]
    JacobianUnavailable(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
