use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // DVEM container
    #[error("bad magic bytes, expected \"DVEM\"")]
    MagicMismatch,
    #[error("unsupported DVEM version {0}")]
    VersionUnsupported(u32),
    #[error("id file has {found} lines but header declares {expected} rows")]
    IdCountMismatch { expected: u64, found: u64 },
    #[error("non-finite value in row {row} column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("row {0} is all zeros and cannot be normalized")]
    ZeroRow(String),
    #[error("invalid sample id {0:?}")]
    InvalidId(String),
    #[error("embedding rows are not unit-normalized")]
    NotNormalized,

    // tables
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("duplicate sample id {0}")]
    DuplicateSample(String),
    #[error("line {line}: detection score {score} outside [0, 1]")]
    ScoreOutOfRange { line: usize, score: f64 },

    // knn
    #[error("dimension mismatch: index has {expected}, query has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("neighbor count must be positive")]
    ZeroNeighbors,
    #[error("query vector is not unit-norm (norm {0})")]
    QueryNotUnit(f64),
    #[error("no label for sample {0}")]
    MissingLabel(String),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    // reference
    #[error("class {0} has no training samples")]
    EmptyClass(String),
    #[error("annotated sample {0} has no label")]
    UnlabeledSample(String),
    #[error("object index {0} outside the model vocabulary")]
    UnknownObject(usize),
    #[error("reference backend needs {0}")]
    MissingInput(&'static str),
    #[error("sample {0} not found")]
    MissingSample(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // metrics
    #[error("empty input")]
    EmptyInput,
    #[error("no samples left after filtering")]
    EmptyAfterFilter,
    #[error("prediction maps cover different sample ids")]
    IdSetMismatch,
    #[error("intersection of correct samples is empty")]
    EmptyIntersection,
    #[error("no annotation for sample {0}")]
    MissingAnnotation(String),
    #[error("ground-truth object set is empty")]
    EmptyTruth,

    // synth
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::ParseError {
            line,
            msg: msg.into(),
        }
    }
}
