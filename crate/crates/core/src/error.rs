use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that cannot be combined by an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration violates one of its invariants.
    #[error("config error: {0}")]
    Config(String),

    /// Caller-supplied data is unusable (ids out of range, empty text, ...).
    #[error("input error: {0}")]
    Input(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Corpus, manifest or checkpoint content does not match what was recorded.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A data source could not deliver what was asked of it.
    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {message}{}", last_good.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Numerical {
        message: String,
        last_good: Option<PathBuf>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            last_good: None,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
