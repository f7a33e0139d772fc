use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("domain error at row {row}: {message}")]
    Domain { row: usize, message: String },

    #[error("infeasible fold split: {0}")]
    InfeasibleSplit(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph is not acyclic; cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("unknown vertex `{0}`")]
    UnknownVertex(String),

    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("learner error: {0}")]
    Learner(String),

    #[error("dimension mismatch: expected {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("conditional-mean policy error: {0}")]
    Policy(String),

    #[error("projection error: {0}")]
    Projection(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
