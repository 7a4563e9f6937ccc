use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// The CLI maps [`Error::Config`] / [`Error::Argument`] to exit code 1 and
/// the data/format variants to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("corrupt record {path}: {msg}")]
    CorruptRecord { path: PathBuf, msg: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid chromosome {genes:?}: {msg}")]
    InvalidChromosome { genes: Vec<u32>, msg: String },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Argument(_) | Error::InvalidChromosome { .. }
        )
    }

    /// Process exit code: 1 for configuration errors, 2 for data errors.
    pub fn exit_code(&self) -> u8 {
        if self.is_config() {
            1
        } else {
            2
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
