use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("decode failed: {0}")]
    Decode(String),

    #[error("forced alignment failed: {0}")]
    Alignment(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("selector interrupted at stage {stage}: {reason}")]
    SelectorInterrupted { stage: usize, reason: String },

    #[error("malformed file: {0}")]
    Schema(String),

    #[error("unsupported schema version: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Shape { .. } => "shape",
            Error::Validation(_) => "validation",
            Error::Numeric(_) => "numeric",
            Error::Decode(_) => "decode",
            Error::Alignment(_) => "alignment",
            Error::Training(_) => "training",
            Error::SelectorInterrupted { .. } => "selector_interrupted",
            Error::Schema(_) => "schema",
            Error::Version { .. } => "version",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
