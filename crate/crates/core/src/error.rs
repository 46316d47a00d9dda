use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is zero or below 1e-12")]
    ZeroVector,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input list")]
    EmptyList,

    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),
    #[error("unknown utterance `{0}`")]
    UnknownUtterance(String),
    #[error("speaker `{0}` has no utterances")]
    NoUtterances(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("need at least {needed} distinct points, found {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("k-means objective increased from {before} to {after} at iteration {iteration}")]
    InertiaIncreased { iteration: usize, before: f64, after: f64 },

    #[error("invalid batch spec: {0}")]
    InvalidBatchSpec(String),
    #[error("need {needed} eligible speakers, corpus has {available}")]
    InsufficientSpeakers { needed: usize, available: usize },
    #[error("cluster map has no usable clusters")]
    EmptyClusterMap,
    #[error("sampler mode requires a cluster map and none was supplied")]
    ClusterMapMissing,

    #[error("anchor row {0} has no positive")]
    NoPositive(usize),
    #[error("invalid target class {target} for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },

    #[error("insufficient data for trials: {0}")]
    InsufficientData(String),
    #[error("speaker `{speaker}` has no `{attribute}` attribute")]
    MissingAttribute { speaker: String, attribute: String },
    #[error("scores need at least one target and one non-target")]
    DegenerateLabels,

    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { expected, got }
    }
}
