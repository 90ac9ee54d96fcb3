use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate spline knots: {0}")]
    DegenerateKnots(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance factorization failed for person {person}: {detail}")]
    Factorization { person: usize, detail: String },

    #[error("rank-deficient design: column `{column}` is linearly dependent on earlier columns")]
    RankDeficient { column: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate inference: standard error must be positive (got {0})")]
    DegenerateInference(f64),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {message}")]
    Json { path: String, message: String },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
