use std::io;

/// Errors produced anywhere in the reduced-order modeling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("query t = {t} outside spline range [{lo}, {hi}]")]
    Extrapolation { t: f64, lo: f64, hi: f64 },

    #[error("solver instability at step {step} (t = {time}): {detail}")]
    Instability {
        step: usize,
        time: f64,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("candidate set exhausted")]
    Exhausted,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by floating-point breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Instability { .. } | Error::Singular(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
