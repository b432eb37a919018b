use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Backward pass attempted with a tape recorded against older parameters.
    #[error("stale cache: tape recorded at parameter version {tape}, store is at {store}")]
    StaleCache { tape: u64, store: u64 },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    /// A field head produced NaN/inf while rendering.
    #[error("non-finite {head} output at x = {x:?}, t = {t}")]
    NonFiniteSample {
        head: &'static str,
        x: [f64; 3],
        t: f64,
    },

    #[error("non-finite loss `{0}`")]
    NonFiniteLoss(String),

    #[error("diverged: {0}")]
    Divergence(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing input: {0}")]
    Missing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (NaN, divergence) as opposed to validation errors.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_)
                | Error::NonFiniteSample { .. }
                | Error::NonFiniteLoss(_)
                | Error::Divergence(_)
        )
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
