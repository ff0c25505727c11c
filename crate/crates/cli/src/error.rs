use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The config file parsed but is unusable, or did not parse at all.
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(#[from] adann::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 config, 3 shape, 4 I/O or malformed file, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 4,
            Self::Core(e) => match e {
                adann::Error::Usage(_) => 2,
                adann::Error::Shape(_) => 3,
                adann::Error::Io(_) | adann::Error::Format(_) | adann::Error::Json(_) => 4,
                _ => 1,
            },
        }
    }
}
