use std::path::PathBuf;

use crate::optim::Trace;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite matrix")]
    NonFinite,
    #[error("svd did not converge")]
    SvdNoConvergence,
    #[error("invalid spectrum")]
    InvalidSpectrum,
    #[error("rank exceeds bottleneck")]
    RankExceedsBottleneck,
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot fit log")]
    CannotFitLog,
    #[error("diverged at step {step}")]
    Diverged { step: usize, partial: Box<Trace> },
    #[error("config error in field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("truncated archive")]
    TruncatedArchive,
    #[error("malformed archive header: {0}")]
    MalformedHeader(String),
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has inconsistent dims: {reason}")]
    TensorDims { name: String, reason: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
