use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("infeasible CTC alignment: {frames} frames cannot emit {required} labels")]
    InfeasibleAlignment { frames: usize, required: usize },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("broken lineage: {0}")]
    Lineage(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },

    #[error("corpus generation failed: {0}")]
    Generation(String),

    #[error("missing file {path}")]
    Missing { path: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::State(_) => "state",
            Error::InfeasibleAlignment { .. } => "infeasible_alignment",
            Error::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
            Error::Format(_) => "format",
            Error::Lineage(_) => "lineage",
            Error::Config { .. } => "config",
            Error::Diverged { .. } => "diverged",
            Error::Generation(_) => "generation",
            Error::Missing { .. } => "missing",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing { path }
        } else {
            Error::Io { path, source }
        }
    }
}
