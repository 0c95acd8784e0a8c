use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system parameters: {0}")]
    InvalidParams(String),

    #[error("configuration space dimension overflows")]
    DimensionOverflow,

    #[error("{field} = {value} is out of range")]
    OutOfRange { field: &'static str, value: i64 },

    #[error("basis index {index} is out of range for dimension {dimension}")]
    IndexOutOfRange { index: usize, dimension: usize },

    #[error("invalid kernel specification: {0}")]
    InvalidKernel(String),

    #[error("kernel cannot be unitarized: symbol norm {norm:e} at momentum {momentum}")]
    DegenerateKernel { momentum: usize, norm: f64 },

    #[error("no action kernel supplied for output symbol {0}")]
    MissingKernel(&'static str),

    #[error("computation step applied to a configuration with c = 1")]
    ControlSector,

    #[error("unitarity audit failed: |(T†T - I)[{row}, {col}]| = {deviation:e}")]
    AuditFailure { deviation: f64, row: usize, col: usize },

    #[error("norm drift {drift:e} after {step} steps")]
    NormDrift { step: usize, drift: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("operation requires a motionless environment")]
    MovingEnvironment,

    #[error("invalid initial state: {0}")]
    InvalidInitialState(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
