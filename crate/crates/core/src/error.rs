use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: max asymmetry {asymmetry:e} exceeds tolerance {tolerance:e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("matrix is not positive semidefinite: min eigenvalue {min_eigenvalue:e}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("need at least 2 samples to estimate a covariance, got {0}")]
    InsufficientData(usize),

    #[error("degenerate covariance: trace {0:e} is not positive")]
    DegenerateCovariance(f64),

    #[error("|beta|*||C|| = {product} exceeds the overflow guard of {limit}")]
    Overflow { product: f64, limit: f64 },

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("target mean {target_mean} is outside the open spectral range ({min}, {max})")]
    InfeasibleTarget { target_mean: f64, min: f64, max: f64 },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("unknown spectrum family '{0}' (expected gaussian, exponential or gamma)")]
    UnknownFamily(String),

    #[error("no connected Erdos-Renyi graph found in {attempts} attempts (p = {edge_prob})")]
    GraphGeneration { attempts: usize, edge_prob: f64 },

    #[error("AR coefficient {0} is not stationary (|phi| must be < 1)")]
    Nonstationary(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence {
        epoch: usize,
        message: String,
        last_finite: Box<crate::network::ModelParams>,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
