use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file content (bad header, unparsable token).
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    /// A vector or row does not have the length the grid requires.
    #[error("shape error at {location}: expected {expected} values, found {found}")]
    Shape {
        location: String,
        expected: usize,
        found: usize,
    },

    /// Values that parse but are not usable (NaN, infinite).
    #[error("data error at {location}: {message}")]
    Data { location: String, message: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid measurement operator: {0}")]
    Operator(String),

    #[error("under-determined least-squares problem: {observations} observations for {unknowns} unknowns")]
    Underdetermined {
        observations: usize,
        unknowns: usize,
    },

    #[error("division by zero: {0}")]
    Division(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
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

    /// Process exit code used by the command-line runner.
    ///
    /// 2 for configuration problems, 3 for bad input data, 4 for numerical
    /// failures and 1 for everything else (I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Operator(_) => 2,
            Error::Format { .. } | Error::Shape { .. } | Error::Data { .. } => 3,
            Error::State(_)
            | Error::Underdetermined { .. }
            | Error::Division(_)
            | Error::Numerical(_) => 4,
            Error::Io { .. } => 1,
        }
    }
}
