use thiserror::Error;

use crate::params::ParamStore;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("softmax row {row} has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        last_finite: Box<ParamStore>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Schema(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Dimension { .. }
            | Error::DegenerateRow { .. }
            | Error::Contract(_)
            | Error::Numeric(_)
            | Error::Divergence { .. } => 4,
        }
    }
}
