use thiserror::Error;

/// Errors raised by the engine, the model and the data generators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes that cannot be combined by an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A value outside an operation's numeric domain (NaN input, log of a
    /// non-positive value, division by zero, ...).
    #[error("numeric error in {op} at index {index}: {detail}")]
    Numeric {
        op: &'static str,
        index: usize,
        detail: String,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; `key` names the offending setting.
    #[error("config error for `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// An id outside its vocabulary or a position outside the context.
    #[error("index error: {0}")]
    Index(String),

    /// Malformed text in a checkpoint or dataset dump.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, index: usize, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            index,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}
