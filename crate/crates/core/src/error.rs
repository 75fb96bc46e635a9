use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate edge ({i}, {j}): endpoints coincide")]
    DegenerateEdge { i: usize, j: usize },

    #[error("non-finite force on point {point}")]
    NonFiniteForce { point: usize },

    #[error("simulation became unstable at frame {frame}")]
    Unstable { frame: usize },

    #[error("non-finite adjoint at frame {frame}")]
    NonFiniteGradient { frame: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("validation failed at `{path}`: {rule}")]
    Validation { path: String, rule: String },

    #[error("non-finite value at `{path}`")]
    NonFinite { path: String },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn validation(path: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            rule: rule.into(),
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }

    /// True for errors caused by bad input files or mismatched shapes.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::DimensionMismatch { .. }
                | Error::Validation { .. }
                | Error::NonFinite { .. }
                | Error::Parse { .. }
                | Error::Io { .. }
        )
    }

    /// True for numerical blow-ups of a rollout.
    pub fn is_instability(&self) -> bool {
        matches!(
            self,
            Error::Unstable { .. } | Error::NonFiniteForce { .. } | Error::NonFiniteGradient { .. }
        )
    }
}
