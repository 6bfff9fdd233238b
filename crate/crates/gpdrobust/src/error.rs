//! Crate-wide error type.

use thiserror::Error;

/// Errors reported by estimation, solving and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Model parameters outside their domain (e.g. `β ≤ 0` or `ξ ≤ 0`).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// A function argument outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally invalid input (empty sample, bad grid, missing column).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input is formally valid but carries no usable information
    /// (e.g. all exceedances identical).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative routine stopped before reaching its tolerance.
    #[error("{routine} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        routine: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A persisted grid file could not be parsed or fails validation.
    #[error("grid file error: {0}")]
    GridFile(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
