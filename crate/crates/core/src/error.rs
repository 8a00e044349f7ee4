use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid hyperparameter or mismatched dimensions.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input is too large or too small for the requested operation.
    #[error("size error: {0}")]
    Size(String),
    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    Empty(&'static str),
    /// Numerical failure (non-PSD kernel, failed factorization).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training produced a non-finite loss.
    #[error("training diverged in stage {stage} at step {step}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        step: usize,
        loss: f64,
    },
    /// Malformed text input; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A pipeline stage was requested before the one it depends on.
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable lower-case tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Size(_) => "size",
            Error::Empty(_) => "empty",
            Error::Numeric(_) => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::Parse { .. } => "parse",
            Error::Dependency(_) => "dependency",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}
