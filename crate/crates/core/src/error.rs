use thiserror::Error;

/// Errors raised anywhere in the model pipeline.
#[derive(Debug, Error)]
pub enum CmmError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value {value} outside support {{0..{max}}}")]
    OutOfSupport { value: i64, max: i64 },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("column '{0}' has zero standard deviation")]
    DegenerateColumn(String),

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("unknown category '{value}' for '{column}'")]
    UnknownCategory { column: String, value: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("non-finite likelihood for child '{child_id}'")]
    NonFinite { child_id: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("no uncensored trials to evaluate")]
    EmptyUncensored,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CmmError>;

impl CmmError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CmmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
