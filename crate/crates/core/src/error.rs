use thiserror::Error;

/// Errors produced by model construction, inference and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed inputs: dimensions, probabilities, parameter ranges.
    #[error("validation error: {0}")]
    Validation(String),

    /// A matrix that must be positive definite failed Cholesky even after jitter.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A Gaussian quadratic form whose precision is singular was integrated.
    #[error("quadratic form is not normalizable: {0}")]
    NonNormalizable(String),

    /// Every candidate weight at some step underflowed to zero.
    #[error("degenerate weights at time {time}: {context}")]
    DegenerateWeights { time: usize, context: String },

    /// The exact enumeration was asked for more sequences than its guard allows.
    #[error("instance too large for enumeration: {sequences} regime sequences exceed the limit of {limit}")]
    InstanceTooLarge { sequences: f64, limit: f64 },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_) | Error::NonNormalizable(_) | Error::DegenerateWeights { .. }
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::NonNormalizable(_) => "non_normalizable",
            Error::DegenerateWeights { .. } => "degenerate_weights",
            Error::InstanceTooLarge { .. } => "instance_too_large",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
