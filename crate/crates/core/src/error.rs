use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty box: lower > upper on axis {axis} ({lower} > {upper})")]
    EmptyBox { axis: usize, lower: f64, upper: f64 },

    #[error("infeasible tightening on axis {axis} ({name}): [{lower}, {upper}]")]
    InfeasibleTightening {
        axis: usize,
        name: String,
        lower: f64,
        upper: f64,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("closed loop is unstable (spectral radius {0})")]
    Unstable(f64),

    #[error("expert infeasible: {0}")]
    ExpertInfeasible(String),

    #[error("non-finite input")]
    NonFinite,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("schema error: {0}")]
    Schema(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
