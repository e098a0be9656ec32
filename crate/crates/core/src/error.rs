use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the summarization engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("stale cache: {0}")]
    StaleCache(&'static str),

    #[error("sequence of {len} frames exceeds the decoder limit of {max}")]
    Length { len: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("video {video}: {source}")]
    Video {
        video: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps an error with the id of the video that produced it.
    pub fn in_video(self, video: impl Into<String>) -> Self {
        Error::Video {
            video: video.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Video { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
