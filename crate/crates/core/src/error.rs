use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Unreadable or structurally invalid input (bad magic number, bad header, bad checkpoint).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Two pieces of data that must agree do not (counts, indices, shapes).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A caller-supplied argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The remote teacher could not be reached. Retriable.
    #[error("transport error talking to {url}: {msg}")]
    Transport { url: String, msg: String },

    /// The remote teacher answered with an error status or a malformed body.
    #[error("protocol error ({status}): {msg}")]
    Protocol { status: u16, msg: String },

    /// Optimization produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Training { epoch: usize, step: usize, msg: String },

    #[error("service startup failed: {0}")]
    Startup(String),

    /// A pipeline stage failed; `stage` names the step of the distillation run.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn consistency(msg: impl Into<String>) -> Self {
        Error::Consistency(msg.into())
    }

    /// Transport failures are the only class worth retrying.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}

/// Tags an error with the pipeline stage it came from.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        })
    }
}
