use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("geometry mismatch between grids")]
    GeometryMismatch,

    #[error("covariance not SPD")]
    CovarianceNotSpd,

    #[error("absolute continuity violated")]
    AbsoluteContinuity,

    #[error("degenerate batch")]
    DegenerateBatch,

    #[error("gradient overflow")]
    GradientOverflow,

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("trajectory diverged at step {step}")]
    TrajectoryDiverged { step: usize },

    #[error("optimizer diverged at iteration {iteration}")]
    OptimizerDiverged { iteration: usize },

    #[error("cost overflow")]
    CostOverflow,

    #[error("B lost positive definiteness")]
    LostPositiveDefiniteness,

    #[error("curvature violated")]
    CurvatureViolated,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
