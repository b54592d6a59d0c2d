use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operator is not hermitian (deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("ground state degenerate at {context}: gap {gap:e} rad/s below floor {floor:e}")]
    Degenerate {
        context: String,
        gap: f64,
        floor: f64,
    },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("state norm drifted to {norm} at t = {time} s (step {step})")]
    NormDrift { norm: f64, time: f64, step: usize },

    #[error("compilation infeasible within budget of {budget} segments (best residual {best_residual:e})")]
    Infeasible { budget: usize, best_residual: f64 },

    #[error("fit failed: {0}")]
    Fit(String),
}
