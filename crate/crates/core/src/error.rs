use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// The plant state left the overflow guard; the robot fell.
    #[error("plant state diverged (robot fell)")]
    Diverged,

    #[error("Riccati iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    RiccatiNotConverged { iterations: usize, residual: f64 },

    #[error("closed loop is not stable: spectral radius {0}")]
    UnstableClosedLoop(f64),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("bias calibration needs at least {needed} frames, got {got}")]
    CalibrationTooShort { needed: usize, got: usize },

    #[error("estimator expected cycle {expected}, got {got}")]
    NonConsecutiveFrame { expected: u64, got: u64 },

    #[error("actuation dilation requested on a lost cycle")]
    DilationOnLostCycle,

    #[error("empty or invalid RMSE window [{k0}, {k_end})")]
    EmptyWindow { k0: usize, k_end: usize },

    #[error("cannot aggregate reports with different windows")]
    InconsistentWindows,

    #[error("no reports to aggregate")]
    NoReports,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
