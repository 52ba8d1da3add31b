use crate::features::Activation;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric: asymmetry {asymmetry:.3e} exceeds tolerance {tolerance:.3e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:.3e} below {threshold:.3e}")]
    NotPsd { eigenvalue: f64, threshold: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("activation {0:?} is not twice differentiable")]
    UnsupportedActivation(Activation),

    #[error("feature-map hooks are stale: parameters changed after the forward pass")]
    StaleHooks,

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unstable time step: dt * max|V''| = {0:.3} must be below 2")]
    UnstableStep(f64),

    #[error("training aborted at step {}: {}", .0.step, .0.reason)]
    Aborted(Box<crate::trainer::AbortReport>),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics themselves (as opposed to bad input or IO).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NotPsd { .. } | Error::Aborted(_) | Error::UnstableStep(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
