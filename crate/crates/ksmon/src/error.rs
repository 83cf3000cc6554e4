//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by fitting, monitoring, calibration, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A point has the wrong number of predictors for the model it was given to.
    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An operation was attempted on a state that cannot support it.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A solver could not reach the requested target.
    #[error("no solution: {0}")]
    NoSolution(String),

    /// The control-limit search exhausted its candidate grid.
    ///
    /// Carries the (delta, estimated ARL0) pairs examined so the caller can
    /// inspect how far the search got.
    #[error("calibration failed: no grid candidate reached target ARL0 {target} (max estimate {max_estimate:.3})")]
    CalibrationFailed {
        target: f64,
        max_estimate: f64,
        curve: Vec<(f64, f64)>,
    },

    /// A study manifest is malformed or self-inconsistent.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A serialized artifact has a schema version this build does not read.
    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },

    /// A serialized artifact is structurally invalid.
    #[error("malformed artifact: {0}")]
    MalformedArtifact(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        Error::MalformedArtifact(msg.into())
    }
}
