use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the failure classes surfaced by
/// the CLI: configuration, data, and numerical errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (node {node}, element {index})")]
    NonFinite {
        op: &'static str,
        node: usize,
        index: usize,
    },

    #[error("numerical failure in {context}: {detail}")]
    Numerical {
        context: &'static str,
        detail: String,
    },

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("unbounded problem: {0}")]
    Unbounded(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numerical { .. } | Error::Unbounded(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
