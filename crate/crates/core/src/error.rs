use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid growth rate: {0}")]
    InvalidRate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("series diverges: {0}")]
    Divergence(String),

    #[error("tail sum from index {start} did not reach relative tolerance {rel_tol:e} within {terms} terms")]
    NonConvergence {
        start: usize,
        rel_tol: f64,
        terms: usize,
    },

    #[error("tabulated growth rate has no data at index {index} (table length {len})")]
    OutOfTable { index: usize, len: usize },

    #[error("no closed form available: {0}")]
    Unsupported(String),

    #[error("unstable block at index {index} is numerically singular (condition number {condition:e})")]
    SingularBlock { index: usize, condition: f64 },

    #[error("non-finite entries while composing the cocycle from {from} to {to}")]
    Overflow { from: usize, to: usize },

    #[error("admissibility failure: {0}")]
    AdmissibilityFailure(String),

    #[error("perturbation certificate failure: {0}")]
    CertificateFailure(String),

    #[error("truncated tail {bound:e} exceeds tolerance {tol:e} at base index {index} with horizon cap {horizon}")]
    TailTooLarge {
        index: usize,
        horizon: usize,
        bound: f64,
        tol: f64,
    },

    #[error("graph operator is not contracting: successive-difference ratio {ratio:e} at iteration {iteration}")]
    NoContraction { iteration: usize, ratio: f64 },

    #[error("fixed-point iteration stopped after {iterations} iterations with difference {difference:e}")]
    IterationLimit { iterations: usize, difference: f64 },

    #[error("trajectory from index {start} escapes its decay bound at index {index}: |x| = {norm:e} > {bound:e}")]
    Escape {
        start: usize,
        index: usize,
        norm: f64,
        bound: f64,
    },

    #[error("graph at index {index} lost its Lipschitz-1 property (discrete constant {constant})")]
    LipschitzViolation { index: usize, constant: f64 },

    #[error("index {index} is outside the solved window [{lo}, {hi}]")]
    IndexOutOfWindow { index: usize, lo: usize, hi: usize },

    #[error("orbit from index {start} leaves the ball B_{index}(delta beta) : |x| = {norm:e} > {radius:e}")]
    BallEscape {
        start: usize,
        index: usize,
        norm: f64,
        radius: f64,
    },

    #[error("non-finite value in output: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
