use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CdtError>;

#[derive(Error, Debug)]
pub enum CdtError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {layer}")]
    Numeric { layer: String },
    #[error("mode error: {0}")]
    Mode(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
}

impl CdtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdtError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CdtError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
