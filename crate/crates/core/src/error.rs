use std::path::PathBuf;

/// Errors raised by the library and the command line front end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad argument to a kernel or an operation (class index, `u`, lengths).
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent or missing configuration (missing noise level, bad RAPS parameters).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed dataset row.
    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Dataset { .. } | Error::Json(_) => 1,
            Error::Io { .. } => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
