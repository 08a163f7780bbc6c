use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An invalid hyperparameter or op argument.
    #[error("config error: {0}")]
    Config(String),

    /// Several config violations found in one validation pass.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),

    /// Missing state, e.g. an optimizer step without gradients.
    #[error("state error: {0}")]
    State(String),

    /// NaN/Inf or out-of-domain values.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("truncated data: {0}")]
    Truncated(String),

    /// Dataset layout or content problems.
    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
