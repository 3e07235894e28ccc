use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("covariance is not positive definite: {0}")]
    SingularCovariance(String),

    #[error("random-effects covariance is not positive semidefinite: {0}")]
    SingularPrior(String),

    #[error("unknown group label `{0}`")]
    MissingGroup(String),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("PVRE undefined for response {0}: zero total variance")]
    UndefinedPvre(usize),

    #[error("correlation undefined: column {0} is constant")]
    UndefinedCorrelation(usize),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("EM diverged at iteration {iteration}: non-finite objective")]
    Divergence { iteration: usize, trace: Vec<f64> },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at row {row}, column {column}: {message}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
