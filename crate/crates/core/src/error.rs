use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {s} lies outside the horizon [{t_start}, {t_end}]")]
    OutsideHorizon { s: f64, t_start: f64, t_end: f64 },

    /// A matrix that must be inverted is numerically singular.
    #[error("singular factor {factor} at s = {s} (smallest singular value {sigma:e})")]
    Singular { factor: String, s: f64, sigma: f64 },

    #[error("non-finite value in {what} at s = {s}")]
    Divergence { what: String, s: f64 },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("Picard iteration did not converge within {iterations} iterations (last change {last:e})")]
    NoConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("oracle refused: {0}")]
    OracleRefused(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
