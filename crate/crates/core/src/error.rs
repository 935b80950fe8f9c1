use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input fell outside the domain of a model relation.
    #[error("domain error in {function}: {detail}")]
    Domain { function: &'static str, detail: String },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: String, reason: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Two non-zero ladder eigenvalues coincide, so the Vandermonde
    /// expansion has no unique solution.
    #[error("degenerate ladder spectrum: eigenvalues {0} and {1} are not distinct")]
    DegenerateSpectrum(f64, f64),

    #[error("Vandermonde matrix is ill-conditioned (condition estimate {0:e})")]
    IllConditioned(f64),

    #[error("non-finite derivative in component `{component}`")]
    NonFinite { component: String },

    #[error("dataset does not match the {expected} experiment design: {detail}")]
    DatasetMismatch { expected: &'static str, detail: String },

    #[error("insufficient data to identify parameters: {0}")]
    Identifiability(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("step ordering violated: {0}")]
    Ordering(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(function: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            function,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParams {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
