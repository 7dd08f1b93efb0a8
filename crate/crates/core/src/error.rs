use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("inflation error: {0}")]
    Inflation(String),
    #[error("stats error: {0}")]
    Stats(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("audit error: {0}")]
    Audit(String),
    #[error("frozen tensor modified: {0}")]
    FreezeViolation(String),
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("unknown ablation arm `{0}` (expected mla, sampler, prompt-position or deep-prompts)")]
    UnknownArm(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
