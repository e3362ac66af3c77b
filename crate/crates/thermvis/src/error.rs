use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] thermvis_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// An input image that exists but cannot be decoded.
    #[error("cannot ingest {}: {reason}", path.display())]
    Ingest { path: PathBuf, reason: String },
    /// A structured file (config, plan, manifest, checkpoint, weights) is malformed.
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    /// Process exit status: 3 for training failures, 4 for evaluation
    /// input errors, 2 for every other input or configuration problem.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(thermvis_core::Error::Diverged { .. }) => 3,
            Error::Evaluation(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(path: impl AsRef<Path>, reason: impl ToString) -> Error {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            reason: reason.to_string(),
        }
    }
}
