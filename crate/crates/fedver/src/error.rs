use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum FedverError {
    #[error("configuration error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("device {device_id}: {message}")]
    Device { device_id: u64, message: String },

    #[error("unknown condition: {0}")]
    UnknownCondition(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FedverError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        FedverError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        FedverError::InvalidInput(message.into())
    }

    pub fn device(device_id: u64, message: impl Into<String>) -> Self {
        FedverError::Device {
            device_id,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        FedverError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FedverError>;
