use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("index {index} out of range (< {bound}) at ({row}, {col})")]
    Index {
        row: usize,
        col: usize,
        index: usize,
        bound: usize,
    },

    #[error("empty reduction over axis {axis} of shape {shape:?}")]
    EmptyReduction { axis: usize, shape: Vec<usize> },

    #[error("batch statistics need at least 2 rows, got {0}")]
    Statistics(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}format error: {msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Format { line: Option<usize>, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("batching error: {0}")]
    Batching(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
