use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite intermediate at flow layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("non-finite log-likelihood at sample {index}")]
    NonFiniteSample { index: usize },

    #[error("stale activation cache: {0}")]
    StaleCache(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid spline parameters: {0}")]
    InvalidSpline(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("degenerate training data: {0}")]
    Degenerate(String),

    #[error("model not initialized: run actnorm initialization before evaluating")]
    Uninitialized,

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, tolerance {tolerance:e})")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("bad magic bytes in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("precision mismatch: file holds {found}, reader expects {expected}")]
    PrecisionMismatch {
        found: &'static str,
        expected: &'static str,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } | Error::Shape(_) => "shape",
            Error::NonFinite(_) | Error::NonFiniteLayer { .. } | Error::NonFiniteSample { .. } => {
                "non_finite"
            }
            Error::StaleCache(_) => "stale_cache",
            Error::InvalidParameter(_) | Error::InvalidSpline(_) => "invalid_parameter",
            Error::InsufficientSamples(_) => "insufficient_samples",
            Error::Degenerate(_) => "degenerate",
            Error::Uninitialized => "uninitialized",
            Error::MetricUndefined(_) => "metric_undefined",
            Error::NotPsd { .. } => "not_psd",
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::PrecisionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Corrupt { .. } => "format",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
