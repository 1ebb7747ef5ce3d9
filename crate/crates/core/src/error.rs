use std::path::PathBuf;

use pllforge_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    #[error("degenerate normalization: matrix is constant ({0})")]
    DegenerateNormalization(f64),
    #[error("prototype for class {0} is undefined (no supporting instances)")]
    UndefinedPrototype(String),
    #[error("strategy {0} requires a transition matrix")]
    MissingMatrix(&'static str),
    #[error("unknown class name {0:?}")]
    UnknownClass(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by bad inputs rather than failures at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Format { .. }
                | Self::Invalid(_)
                | Self::UnknownClass(_)
                | Self::MissingMatrix(_)
                | Self::UndefinedPrototype(_)
                | Self::UndefinedSimilarity(_)
                | Self::DegenerateNormalization(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Invalid(msg.into()))
}
