use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("noise level must be strictly positive, got {0}")]
    NonpositiveNoiseLevel(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is singular or numerically not invertible")]
    Singular,

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-monotone time for asset {asset} at t={time}")]
    NonMonotoneTime { asset: String, time: f64 },

    #[error("asset {0:?} has fewer than two observations")]
    EmptyAsset(String),

    #[error("input contains no observations")]
    EmptyInput,

    #[error("need at least two ticks, got {0}")]
    TooFewTicks(usize),

    #[error("infeasible block grid: {0}")]
    InfeasibleGrid(String),

    #[error("spectral statistics and local model are on different grids")]
    GridMismatch,

    #[error("eigenvalue argument must be strictly positive, got {0}")]
    NonpositiveLambda(f64),

    #[error("block transformation {0} is singular")]
    SingularTransform(usize),

    #[error("non-finite integrand at t={0}")]
    QuadratureFailure(f64),

    #[error("index ({p}, {q}) out of range for dimension {d}")]
    IndexOutOfRange { p: usize, q: usize, d: usize },

    #[error("noise levels are not homogeneous")]
    InhomogeneousNoise,

    #[error("seasonal shape cannot be normalized")]
    NonintegrableShape,

    #[error("Euler scheme needs at least 100 steps, got {0}")]
    StepTooCoarse(usize),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
