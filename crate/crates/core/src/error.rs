use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("covariance matrix is not positive definite (jitter retries exhausted)")]
    NotPositiveDefinite,

    #[error("degenerate responsibility row {row}")]
    DegenerateResponsibility { row: usize },

    #[error("dead component {component}: responsibility mass {mass:e} below threshold")]
    DeadComponent { component: usize, mass: f64 },

    /// Class numbers in messages are 1-based.
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("instance too large for enumeration oracle ({terms} terms, cap {cap})")]
    InstanceTooLarge { terms: f64, cap: f64 },

    #[error("pass {pass}: {source}")]
    AtPass {
        pass: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("block {block}: {source}")]
    AtBlock {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("NaN class score")]
    NanScore,

    #[error("degenerate weight matrix: no entry at or above threshold")]
    DegenerateWeights,

    #[error("image has zero total intensity")]
    ZeroIntensity,

    #[error("pca rank {requested} exceeds the maximum {max}")]
    PcaRank { requested: usize, max: usize },

    #[error("fold {fold} training split is missing class {class}")]
    FoldMissingClass { fold: usize, class: usize },

    #[error("model invariant violated: {0}")]
    Invariant(Violation),

    #[error("unsupported bundle format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_pass(self, pass: usize) -> Self {
        Error::AtPass {
            pass,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_block(self, block: usize) -> Self {
        Error::AtBlock {
            block,
            source: Box::new(self),
        }
    }

    /// Strips pass/block context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtPass { source, .. } | Error::AtBlock { source, .. } => source.root(),
            e => e,
        }
    }
}
