use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("missing audio files: {}", format_paths(.0))]
    MissingAudio(Vec<PathBuf>),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

fn format_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 1 for bad input, 2 for
    /// runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Manifest { .. } | Error::MissingAudio(_) | Error::Wav(_) => 1,
            Error::State(_) | Error::Numeric(_) | Error::UndefinedMetric(_) | Error::Io { .. } => 2,
        }
    }
}
