use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("colorspace: expected {expected:?}, got {got:?}")]
    ColorSpace {
        expected: crate::image::ColorSpace,
        got: crate::image::ColorSpace,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            Error::Checkpoint(_) => 2,
            Error::Data { .. } | Error::Io { .. } => 3,
            Error::Shape(_) | Error::ColorSpace { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
