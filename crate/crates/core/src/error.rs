use thiserror::Error;

/// Errors raised anywhere in the decision-map engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("classifier backend error: {message}")]
    Backend { message: String, payload: String },

    #[error("labels contain a single class; at least two are required")]
    DegenerateLabels,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("curve fit did not converge after {0} iterations")]
    Fit(usize),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("only {available} distinct neighbors available, {requested} requested")]
    NeighborhoodExhausted { available: usize, requested: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn backend(message: impl Into<String>, payload: impl Into<String>) -> Self {
        Error::Backend {
            message: message.into(),
            payload: payload.into(),
        }
    }

    pub(crate) fn param(message: impl Into<String>) -> Self {
        Error::Parameter(message.into())
    }

    /// True for errors caused by caller input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::DegenerateLabels
                | Error::Parameter(_)
                | Error::Data(_)
                | Error::Unsupported(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
