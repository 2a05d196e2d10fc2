use std::path::PathBuf;

use thiserror::Error;

use crate::solver::GnReport;

pub type Result<T, E = DceeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DceeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The leading (quadratic) reward coefficient is not sufficiently negative,
    /// so the optimal-operation map is undefined or ill-conditioned.
    #[error("curvature violation: theta[0] = {theta0} must be <= -{floor}")]
    CurvatureViolation { theta0: f64, floor: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    /// A candidate input drives a predicted ensemble member out of the
    /// admissible set.
    #[error("infeasible candidate input u = {u}: {reason}")]
    InfeasibleCandidate { u: f64, reason: String },

    #[error("normal equations are rank deficient; retry with damping > 0")]
    RankDeficient,

    #[error("solver failure after {} iterations: {reason}", report.iterations)]
    SolverFailure { reason: String, report: Box<GnReport> },

    #[error("contraction rate undefined: Gauss-Newton curvature is not positive definite")]
    RateUndefined,

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl DceeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DceeError::Io { path: path.into(), source }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, DceeError::InfeasibleCandidate { .. })
    }
}
