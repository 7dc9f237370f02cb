use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto coarse failure classes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error in `{field}`: {detail}")]
    Format { field: String, detail: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("missing provenance: {0}")]
    Provenance(String),
    #[error("missing reference: {0}")]
    Reference(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
