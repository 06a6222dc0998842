use std::path::PathBuf;

use crate::featmap::InversionReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "fixed-point inversion did not converge after {} iterations (relative residual {:.3e})",
        .0.iterations_used,
        .0.relative_residual
    )]
    NotConverged(InversionReport),

    #[error("degenerate direction: class means differ by {norm:.3e}")]
    DegenerateDirection { norm: f64 },

    #[error("no loss site passes the AUC threshold {tau}")]
    NoSupervision { tau: f64 },

    #[error("site (layer {layer}, position {position}) does not resolve: {reason}")]
    UnresolvableSite {
        layer: usize,
        position: i64,
        reason: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("unsupported container: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
