use thiserror::Error;

/// Errors produced by model validation, filtering, sampling, and the
/// experiment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ergodicity check failed: Q^{power} has a zero entry at ({row}, {col})")]
    NotErgodic { power: usize, row: usize, col: usize },

    #[error("emission likelihood underflowed to zero at time index {t}")]
    ZeroLikelihood { t: usize },

    #[error("sampler aborted at iteration {iter}: {source}")]
    SamplerAbort {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("EM fit collapsed on state {state}: {reason}")]
    DegenerateFit { state: usize, reason: String },

    #[error("subset {subset} covariance is singular beyond regularization")]
    SingularCovariance { subset: usize },

    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
