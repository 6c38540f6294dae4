use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("degenerate density: standard deviation is zero")]
    DegenerateDensity,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite even after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("predictive function is not deterministic: {0}")]
    Nondeterministic(String),

    #[error("cache unsound for this mask")]
    CacheUnsound,

    #[error("training diverged at epoch {epoch}: loss {loss} vs initial {initial}")]
    Diverged {
        epoch: usize,
        loss: f64,
        initial: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("estimated cost {estimated:.3e} FLOPs exceeds budget {budget:.3e}")]
    Budget { estimated: f64, budget: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(value: f64, what: &'static str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
