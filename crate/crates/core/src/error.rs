//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GxError>;

#[derive(Debug, Error)]
pub enum GxError {
    #[error("metric is not positive definite at ({x:.6}, {y:.6}, {z:.6})")]
    DegenerateMetric { x: f64, y: f64, z: f64 },

    #[error("point ({x:.6}, {y:.6}, {z:.6}) is outside the chart bounding box")]
    OutsideChart { x: f64, y: f64, z: f64 },

    #[error("geodesic integrator failed: {0}")]
    IntegratorFailure(String),

    #[error("energy drift {drift:.3e} exceeds {limit:.3e} during trace")]
    EnergyDrift { drift: f64, limit: f64 },

    #[error("grid/field mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("boundary collar is invalid: {0}")]
    CollarInvalid(String),

    #[error("conjugate-gradient solve did not converge: residual {residual:.3e} after {iters} iterations")]
    CgDiverged { residual: f64, iters: usize },

    #[error("operation is not supported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("assertion failed: {0}")]
    AssertionFailed(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),
}
