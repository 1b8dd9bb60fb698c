use thiserror::Error;

/// Errors raised by the laboratory's numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("mass mismatch between measures: {0:e}")]
    MassMismatch(f64),

    #[error("quadrature did not converge (estimate {estimate:e}, error {error:e})")]
    QuadratureDivergence { estimate: f64, error: f64 },

    #[error("rejection sampling failed after {0} proposals")]
    SamplingExhausted(u64),

    #[error("trajectory window too short: spans {span}, needs {tau}")]
    WindowTooShort { span: f64, tau: f64 },

    #[error("CFL condition violated: max|v|*dt = {shift} exceeds {limit}")]
    Cfl { shift: f64, limit: f64 },

    #[error("phase-space support reached the grid boundary at t = {0}")]
    GridBoundary(f64),

    #[error("non-finite state at step {0}")]
    NonFinite(usize),

    #[error("integration unstable at step {step}: relative energy drift {drift:e}")]
    Unstable { step: usize, drift: f64 },

    #[error("transport solver failed: {0}")]
    Solver(String),

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
