use std::path::PathBuf;

use bootseg_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what} {path}: {msg}")]
    Format {
        what: &'static str,
        path: PathBuf,
        msg: String,
    },
    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("scene generation infeasible: {0}")]
    Infeasible(String),
    #[error("no hard examples (clipped loss > 0.2) in round {round}; bootstrapping would be a no-op")]
    NoHardExamples { round: usize },
    #[error("missing sample data for ids {0:?}")]
    MissingSamples(Vec<u64>),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("output directory {0} is locked by another command (remove .lock if stale)")]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) | Error::Contract { .. } => "contract",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::MissingArtifacts(_) => "missing_artifact",
            Error::Diverged { .. } => "diverged",
            Error::Infeasible(_) => "infeasible",
            Error::NoHardExamples { .. } => "no_hard_examples",
            Error::MissingSamples(_) => "missing_samples",
            Error::Round { source, .. } => source.kind(),
            Error::Locked(_) => "locked",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
