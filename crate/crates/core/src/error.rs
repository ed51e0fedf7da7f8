//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that must agree do not.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// An index or count fell outside its permitted range.
    #[error("range error: {0}")]
    Range(String),

    /// Input for which the quantity is undefined (zero norm and similar).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("config error: {0}")]
    Config(String),

    /// A metric is undefined for the given data (too short, zero variance).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A manifest or checkpoint record could not be parsed.
    #[error("parse error in record {record}: field `{field}`: {message}")]
    Parse {
        record: usize,
        field: String,
        message: String,
    },

    /// Training produced a non-finite loss.
    #[error("loss diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable tag, used by the command-line diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Range(_) => "range",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Config(_) => "config",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Parse { .. } => "parse",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }
}
