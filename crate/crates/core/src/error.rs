//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::solver::Solution;

pub type Result<T, E = GeoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GeoError {
    /// The nearest point on the manifold is not unique (axis or center of the manifold).
    #[error("point lies within {guard:e} of the singular set of the {manifold}")]
    SingularPoint { manifold: &'static str, guard: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// All kernel weights vanished, which only happens for non-finite input.
    #[error("kernel weights degenerate (non-finite query or cloud)")]
    DegenerateWeights,

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("antipodal decoded block {block}: spherical distance gradient is singular")]
    AntipodalBlock { block: usize },

    #[error("consecutive path points coincide; the discrete velocity vanishes")]
    DegenerateStep,

    /// The solver stopped without reaching the requested accuracy. The best
    /// path found so far is attached.
    #[error("solver did not converge: {}", .0.report.stop_reason)]
    NotConverged(Box<Solution>),

    #[error("parse error at {location}, field `{field}`: {message}")]
    Parse {
        location: String,
        field: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GeoError {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        GeoError::DimensionMismatch {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn parse(
        location: impl Into<String>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        GeoError::Parse {
            location: location.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(GeoError::dim(context, expected, got))
    }
}
