use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("node {node} has degree 0; the normalized Laplacian is undefined")]
    DegenerateDegree { node: usize },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("{what} did not converge (residual {residual:e})")]
    NoConvergence { what: &'static str, residual: f64 },

    #[error("positional encoding: {0}")]
    Selection(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{path}: malformed data at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
