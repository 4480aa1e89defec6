use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image: {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown label color ({r}, {g}, {b}) in {path} ({count} pixels)")]
    UnknownColor {
        path: PathBuf,
        r: u8,
        g: u8,
        b: u8,
        count: usize,
    },

    #[error("label index {index} out of range for {n_class} classes")]
    LabelOutOfRange { index: u8, n_class: usize },

    #[error("unpaired files: {}", .0.join(", "))]
    Orphans(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown fusion strategy `{0}`")]
    UnknownStrategy(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
