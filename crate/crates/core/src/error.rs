use thiserror::Error;

use crate::pathsim::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A trajectory hit a non-finite value; the partial path is kept for inspection.
    #[error("numeric failure at t = {time}: {message}")]
    PathNumeric {
        time: f64,
        message: String,
        partial: Box<Trajectory>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("binning mismatch: {0}")]
    BinningMismatch(String),

    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),

    #[error("mass extinction at t = {time}: every particle was killed within one micro-step ({hint})")]
    MassExtinction { time: f64, hint: String },

    #[error("negative off-diagonal {value:e} at ({row}, {col}); refine the grid")]
    NonMonotoneStencil { row: usize, col: usize, value: f64 },

    #[error("no convergence after {iterations} iterations: {detail}")]
    NoConvergence { iterations: usize, detail: String },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }
}
