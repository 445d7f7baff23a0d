use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The variants line up with the process exit codes used by the CLI, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or layout mismatch, unknown node ids, malformed files.
    #[error("structural error: {0}")]
    Structural(String),

    /// A NaN or infinity showed up where a finite value was required.
    #[error("numeric error: {context}")]
    Numeric { context: String },

    /// Root bracketing or bisection failed.
    #[error("solver error: {0}")]
    Solver(String),

    /// Bad configuration keys or values.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problems: missing columns, ragged rows, constant columns.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data/io, 4 numeric/solver, 5 structural.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric { .. } | Error::Solver(_) => 4,
            Error::Structural(_) => 5,
        }
    }
}

/// Returns `Err(Error::Numeric)` unless `x` is finite.
pub(crate) fn ensure_finite(x: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numeric(format!("{} is {}", what(), x)))
    }
}
