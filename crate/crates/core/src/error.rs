//! Error type shared by all numerical modules.

use thiserror::Error;

/// Errors raised by the library's numerical operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("inadmissible allocation: {0}")]
    InadmissibleAllocation(String),

    #[error("boundary maximisation supports 1 or 2 risky assets, got {0}")]
    UnsupportedDimension(usize),

    #[error(
        "fixed-point iteration did not converge after {iterations} iterations \
         (residual {residual:.3e}, tolerance {tolerance:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
