use std::path::PathBuf;

/// Errors shared across the toolkit. The CLI maps `Io` to exit code 2 and
/// everything else to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported sample rate: {0} Hz (pipeline is fixed at 44100 Hz)")]
    UnsupportedRate(u32),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed model file: {0}")]
    InvalidModel(String),

    #[error("training diverged: non-finite {0}")]
    TrainingDiverged(String),

    #[error("stream is closed")]
    StreamClosed,
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
