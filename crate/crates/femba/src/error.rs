use std::io;

/// Errors of the std layer. Every variant maps to one process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] femba_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// 2 for malformed input, 3 for configuration or shape problems, 4 for
    /// infeasible tiling.
    pub fn exit_code(&self) -> i32 {
        use femba_core::Error as C;
        match self {
            Error::Format { .. } | Error::Io { .. } => 2,
            Error::Config(_) => 3,
            Error::Core(C::Planning(_)) => 4,
            Error::Core(C::Encoding(_)) => 2,
            Error::Core(_) => 3,
        }
    }
}
