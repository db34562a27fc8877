use std::path::PathBuf;

use dynloss_autodiff::AdError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss in stage {stage}, step {step}")]
    NonFiniteLoss { stage: usize, step: usize },

    #[error("non-finite {what} in stage {stage}")]
    NonFiniteHypergradient { what: &'static str, stage: usize },

    #[error("updated DLN parameters are not linked to the teacher on a tape")]
    BrokenLinkage,

    #[error("QR iteration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("invalid block partition: {0}")]
    Partition(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for numerical blow-ups, which long runs may choose to skip.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            Error::Autodiff(AdError::NonFinite { .. }) | Error::NonFiniteHypergradient { .. }
        )
    }
}
