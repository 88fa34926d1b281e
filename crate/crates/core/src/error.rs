use thiserror::Error;

/// Errors produced by the mesh, solver, and design layers.
#[derive(Debug, Error)]
pub enum OedError {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("assembly error: triangle {index} is degenerate (signed area {area:e})")]
    DegenerateTriangle { index: usize, area: f64 },

    #[error("location error: point ({x}, {y}) is not inside the domain")]
    Location { x: f64, y: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("non-finite state detected in time step {step}")]
    NonFinite { step: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("inverse square root iteration failed: residual {residual:e} exceeds {tolerance:e}")]
    Whitening { residual: f64, tolerance: f64 },

    #[error("weight {value} at index {index} lies outside [0, 1]")]
    WeightDomain { index: usize, value: f64 },

    #[error("dense assembly requested for n = {n}, above the cap of {cap}")]
    DenseCap { n: usize, cap: usize },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported surrogate format version {0}")]
    FormatVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OedError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(OedError::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
