use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("ensemble has no particles")]
    EmptyEnsemble,

    #[error("ensemble weights must be uniform for {0}")]
    NotUniform(&'static str),

    #[error("mixture coefficient {0} outside [0, 1]")]
    InvalidMixture(f64),

    #[error("rotation has spectral norm {0} > 1")]
    RotationNorm(f64),

    #[error("rotation must be square, got {rows}x{cols}")]
    RotationShape { rows: usize, cols: usize },

    #[error("convex hull decomposition refused for k = {0} (2^k terms)")]
    HullTooLarge(usize),

    /// The model covariance is numerically singular even after ridge
    /// regularization: the ensemble sits on (or next to) the degenerate set
    /// where `rank Sigma_mm < k`.
    #[error("model covariance singular after ridge (lambda_min = {lambda_min:e}); ensemble is degenerate")]
    SingularCovariance { lambda_min: f64 },

    #[error("Gram matrix Cholesky failed after jitter escalation to {jitter:e}")]
    CholeskyFailed { jitter: f64 },

    #[error("{what} budget exceeded: {size} > {limit}; subsample the ensemble first")]
    Budget {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("unknown input distribution `{0}`")]
    UnknownDistribution(alloc::string::String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("eigendecomposition failed")]
    EigenFailed,
}
