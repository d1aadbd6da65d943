use thiserror::Error;

/// Errors surfaced by the core pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Bipartite matching was asked to assign more targets than queries.
    #[error("insufficient queries: {targets} targets but only {queries} queries")]
    InsufficientQueries { targets: usize, queries: usize },

    /// A cost matrix handed to the assignment solver contains NaN or infinity.
    #[error("non-finite entry in cost matrix at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    /// A mask became empty after downsampling to feature resolution.
    #[error("mask is empty after downsampling to feature resolution")]
    EmptyMask,

    /// A pooled embedding has zero norm and cannot be compared by cosine.
    #[error("zero-norm embedding cannot be classified")]
    ZeroNormEmbedding,

    /// Required data (checkpoint, oracle map, dataset file) is missing.
    #[error("missing data: {0}")]
    MissingData(String),

    /// Malformed on-disk artifact.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
