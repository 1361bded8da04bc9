use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("simplex invariant violated: {0}")]
    Simplex(String),

    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),
}
