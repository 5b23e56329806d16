use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index ({i}, {j}) out of range for {size} positions")]
    IndexOutOfRange { i: usize, j: usize, size: usize },

    #[error("non-finite affinity at ({i}, {j})")]
    NonFiniteAffinity { i: usize, j: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid kernel specification: {0}")]
    InvalidKernel(String),

    #[error("degenerate row {row}: row sum {sum:e} is not positive")]
    DegenerateRow { row: usize, sum: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("blow-up at step {step}: max |Z| = {max_abs:e}")]
    BlowUp { step: usize, max_abs: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
