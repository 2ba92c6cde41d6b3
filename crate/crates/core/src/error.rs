use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("numeric error at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("access violation: {0}")]
    Access(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Input,
    Numeric,
    Io,
    Consistency,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Input => 3,
            Category::Numeric => 4,
            Category::Io => 5,
            Category::Consistency => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Input => "input",
            Category::Numeric => "numeric",
            Category::Io => "io",
            Category::Consistency => "consistency",
        }
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) => Category::Config,
            Error::Input(_) | Error::Contract(_) | Error::Generation(_) | Error::Access(_) => {
                Category::Input
            }
            Error::Numeric { .. } => Category::Numeric,
            Error::Io { .. } | Error::Format { .. } => Category::Io,
            Error::Consistency(_) => Category::Consistency,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
