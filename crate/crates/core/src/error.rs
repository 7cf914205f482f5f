use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("covariance condition number {cond:.3e} exceeds limit {limit:.1e}")]
    IllConditioned { cond: f64, limit: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("point clouds have unequal sizes {a} and {b}; exact solver needs equal counts")]
    UnequalCounts { a: usize, b: usize },

    #[error("cloud size {n} exceeds exact-solver cap {cap}; use the batched estimator")]
    SolverCap { n: usize, cap: usize },

    #[error("observation is out of distribution: evidence density {density:.3e} is below the floor {floor:.1e}")]
    OutOfDistribution { density: f64, floor: f64 },

    #[error("training diverged at step {step} (non-finite loss)")]
    Divergence { step: usize },

    #[error("truncation radius {radius} gives acceptance probability {mass:.3e} below 1e-6")]
    TruncationTooTight { radius: f64, mass: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
