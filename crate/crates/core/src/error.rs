use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{matrix} is not numerically positive definite")]
    Factorization { matrix: &'static str },

    #[error("rank deficiency: {0}")]
    RankDeficiency(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("objective became non-finite after {shrinks} step reductions")]
    NonFiniteObjective { shrinks: usize },

    #[error("truth vector is constant; R^2 is undefined")]
    ConstantTruth,

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("regression coefficients are zero (norm {norm:e}); no response-linked component")]
    ZeroBeta { norm: f64 },

    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: String,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
