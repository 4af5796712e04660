use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called before forward on {0}")]
    NoForward(&'static str),

    #[error("annotation parse error at line {line} in <{element}>: {message}")]
    Annotation {
        element: String,
        line: u32,
        message: String,
    },

    #[error("image load error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("pretraining failed: held-out accuracy {accuracy:.3} after {epochs} epochs")]
    PretrainFailed { accuracy: f64, epochs: usize },

    #[error("training diverged in stage {stage} (epoch {epoch}): {message}")]
    Diverged {
        stage: String,
        epoch: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
