use thiserror::Error;

use crate::multiindex::Condition;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0} vs {1} cells")]
    GridMismatch(usize, usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid index ({condition} violated): {detail}")]
    InvalidIndex { condition: Condition, detail: String },

    #[error("CFL violated at step {step}: dt = {dt:.3e} exceeds {limit:.3e}")]
    Cfl { step: usize, dt: f64, limit: f64 },

    #[error("negative density {value:.3e} at step {step} exceeds clipping tolerance")]
    NegativeDensity { step: usize, value: f64 },

    #[error("bandwidth h = {h:.3e} outside [{min:.3e}, 0.25]")]
    Bandwidth { h: f64, min: f64 },

    #[error("time range mismatch: {0}")]
    TimeRange(String),

    #[error("missing cached sub-solution {0}")]
    MissingCache(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
