use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("{0}")]
    Validation(String),

    #[error("ticker `{0}` has no sector assignment")]
    MissingSector(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}`{}: {source}", epoch.map(|e| format!(" (epoch {e})")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        epoch: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::MissingSector(_) => 2,
            Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
    fn stage_epoch(self, stage: &'static str, epoch: usize) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            epoch: None,
            source: Box::new(e),
        })
    }

    fn stage_epoch(self, stage: &'static str, epoch: usize) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            epoch: Some(epoch),
            source: Box::new(e),
        })
    }
}
