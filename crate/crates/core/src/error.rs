use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DenetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DenetError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite loss {value} on sample `{sample}`")]
    NonFiniteLoss { sample: String, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

impl DenetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DenetError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        DenetError::Format { path: path.into(), msg: msg.into() }
    }

    /// Validation problems map to 1, runtime failures (I/O, divergence) to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            DenetError::Io { .. } | DenetError::NonFiniteLoss { .. } | DenetError::Runtime(_) => 2,
            _ => 1,
        }
    }
}

/// Parses JSON, prefixing any error with the path of the offending field.
pub(crate) fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> std::result::Result<T, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            e.inner().to_string()
        } else {
            format!("{path}: {}", e.inner())
        }
    })
}
