//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {reason}")]
    InvalidGrid { reason: String },

    #[error("grid mismatch: {reason}")]
    GridMismatch { reason: String },

    #[error("invalid kernel set: {reason}")]
    InvalidKernel { reason: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Measure validation failure; `row` is the first violated parent row
    /// (1-based), or 0 for structural problems not tied to a row.
    #[error("invalid measure (row {row}): {reason}")]
    InvalidMeasure { row: usize, reason: String },

    #[error("incompatible domains: {reason}")]
    IncompatibleDomains { reason: String },

    #[error("invalid tolerance {value}")]
    InvalidTolerance { value: f64 },

    #[error("empty measure collection in set distance")]
    EmptySet,

    #[error("invalid observations: {reason}")]
    InvalidObservations { reason: String },

    #[error("invalid input: {reason}")]
    InvalidInput { reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// Integration produced a non-finite state; `step` is the RK4 step index
    /// (1-based) at which it was first detected.
    #[error("integration failure: non-finite state after step {step}")]
    Integration { step: usize },

    #[error("degenerate finite-difference step {h}: perturbation vanished")]
    DegenerateStep { h: f64 },

    /// Forward solve failed inside a cost evaluation; carries the measure
    /// that triggered it, serialized as JSON.
    #[error("cost evaluation failed: {source}")]
    CostEvaluation { source: Box<Error>, measure_json: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics themselves, as opposed to bad input.
    /// Command-line tools map these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Integration { .. } | Error::DegenerateStep { .. } => true,
            Error::CostEvaluation { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn invalid_input(reason: impl Into<String>) -> Self {
        Error::InvalidInput { reason: reason.into() }
    }
}
