use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the normalization threshold")]
    DegenerateNorm { norm: f64 },
    #[error("mean of support embeddings for class {label} has degenerate norm {norm:e}")]
    DegenerateMean { label: u32, norm: f64 },
    #[error("batch row {row}: {source}")]
    BatchRow {
        row: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("objective returned a non-finite value")]
    NonFiniteLoss,
    #[error("gradient for parameter `{param}` contains a non-finite entry")]
    NonFiniteGradient { param: String },
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("class {0} already has a column in the head")]
    DuplicateClass(u32),
    #[error("training label {0} has no column in the head")]
    MissingClassColumn(u32),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("could not place {classes} centers with minimum angle {min_angle_deg} degrees")]
    CenterPackingFailure { classes: usize, min_angle_deg: f64 },
    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("file is shorter than its declared payload ({needed} bytes needed, {available} present)")]
    TruncatedFile { needed: usize, available: usize },
    #[error("base class count {base} invalid for a catalog of {classes} classes")]
    InvalidBaseCount { base: usize, classes: usize },
    #[error("class {label} has {available} training examples, {requested} requested")]
    InsufficientExamples {
        label: u32,
        requested: usize,
        available: usize,
    },
    #[error("augmentation {kind} does not apply to {modality} data")]
    UnsupportedModality {
        kind: &'static str,
        modality: &'static str,
    },
    #[error("no test examples remain after filtering")]
    EmptyFilteredSet,
    #[error("nearest-neighbor store is empty")]
    EmptyStore,
    #[error("unknown configuration `{0}`")]
    UnknownConfig(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable category, used by the CLI exit path.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DegenerateNorm { .. }
            | Error::DegenerateMean { .. }
            | Error::NonFiniteLoss
            | Error::NonFiniteGradient { .. } => "numeric",
            Error::BatchRow { source, .. } => source.category(),
            Error::InvalidShape(_)
            | Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange { .. } => "shape",
            Error::DuplicateClass(_) | Error::MissingClassColumn(_) => "model",
            Error::EmptyDataset
            | Error::CenterPackingFailure { .. }
            | Error::BadMagic { .. }
            | Error::CountMismatch { .. }
            | Error::TruncatedFile { .. }
            | Error::InvalidBaseCount { .. }
            | Error::InsufficientExamples { .. }
            | Error::UnsupportedModality { .. }
            | Error::EmptyFilteredSet
            | Error::EmptyStore => "data",
            Error::UnknownConfig(_) | Error::InvalidConfig(_) => "config",
            Error::BadVersion(_) | Error::CorruptPayload(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
