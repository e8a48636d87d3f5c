use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0}: only p = 1 and p = 2 are implemented")]
    UnsupportedDimension(usize),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("cell index {index} out of range for a grid with {cells} cells")]
    InvalidCell { index: usize, cells: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("measure is not normalized: total mass {total}")]
    NotNormalized { total: f64 },
    #[error("measure has a negative or non-finite weight {value} at cell {cell}")]
    InvalidWeight { cell: usize, value: f64 },
    #[error("kernel row {cell} is not normalized: row mass {total}")]
    UnnormalizedRow { cell: usize, total: f64 },
    #[error("lift window too small for h = {h}: Gaussian tail mass {tail:e} exceeds 1e-9")]
    LiftWindowTooSmall { h: f64, tail: f64 },
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("quadrature did not converge on [{lo}, {hi}]")]
    Quadrature { lo: f64, hi: f64 },
    #[error("target {target} outside the attainable range [{lo:e}, {hi:e}]")]
    OutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("threshold search exhausted: {0}")]
    SearchExhausted(String),
    #[error("time step {dt} violates the stability bound {limit}")]
    Stability { dt: f64, limit: f64 },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("time stamps do not match: {0}")]
    TimeMismatch(String),
    #[error("energy ladder diverges: the path has infinite cost")]
    Divergent,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
