use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used for CLI exit codes and log prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
    Io,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Data => 3,
            Category::Numeric => 4,
            Category::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    Missing(PathBuf),
    #[error("corrupt checkpoint at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint kind `{found}` does not match expected `{expected}`")]
    KindMismatch { found: String, expected: String },
    #[error("checkpoint config mismatch on `{key}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        key: String,
        found: String,
        expected: String,
    },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<i64>,
        expected: Vec<i64>,
    },
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParameter(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor backend error: {0}")]
    Torch(#[from] tch::TchError),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) | Error::Argument(_) => Category::Config,
            Error::Checkpoint(CheckpointError::Missing(_)) => Category::Io,
            Error::Checkpoint(_) | Error::Data(_) => Category::Data,
            Error::Numeric(_) | Error::Torch(_) => Category::Numeric,
            Error::Io { .. } => Category::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure_arg {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Argument(format!($($fmt)+)));
        }
    };
}

macro_rules! ensure_config {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Config(format!($($fmt)+)));
        }
    };
}

pub(crate) use ensure_arg;
pub(crate) use ensure_config;
