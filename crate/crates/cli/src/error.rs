use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("model file {}: {msg}", path.display())]
    ModelFile { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] ffcnn::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for configuration problems, 2 for missing or unreadable data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Data(_) | Self::ModelFile { .. } | Self::Io { .. } => 2,
            Self::Core(ffcnn::Error::Io(_) | ffcnn::Error::Format { .. }) => 2,
            Self::Config(_) | Self::Core(_) => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
