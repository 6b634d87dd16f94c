use thiserror::Error;

#[derive(Debug, Error)]
pub enum BommError {
    #[error("coordinate {dim} = {value} lies outside [{lower}, {upper}]")]
    DomainViolation {
        dim: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("Box-Cox input must be strictly positive, got {0}")]
    Positivity(f64),

    #[error("value {value} outside the admissible interval ({lower}, {upper})")]
    Range { value: f64, lower: f64, upper: f64 },

    #[error("Gram matrix is not positive definite even with nugget {nugget:e}")]
    Conditioning { nugget: f64 },

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-additivity diagnostic failed: {0}")]
    Diagnostic(String),

    #[error("objective evaluation failed: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BommError>;
