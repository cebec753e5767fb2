//! Crate-wide error type.

use std::path::PathBuf;

/// Every fallible operation in this crate returns this error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("invalid record {record_id}: {reason}")]
    InvalidRecord { record_id: u64, reason: String },
    #[error("patient {patient_id} spans cohorts {first} and {second}")]
    InconsistentCohort {
        patient_id: u64,
        first: u16,
        second: u16,
    },
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sampling rate {fs} Hz too low: need more than {min} Hz")]
    RateTooLow { fs: f64, min: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("record {record_id} lacks lead {lead}")]
    MissingLead { record_id: u64, lead: String },
    #[error("record {record_id} too short: {available} samples, need {required}")]
    TooShort {
        record_id: u64,
        available: usize,
        required: usize,
    },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: String },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("undefined similarity: zero-norm vector at row {0}")]
    ZeroNorm(usize),
    #[error("cohort {cohort_id} has {available} pairs, fewer than batch size {batch_pairs}")]
    CohortTooSmall {
        cohort_id: u16,
        available: usize,
        batch_pairs: usize,
    },
    #[error("heterogeneous batch mixes cohorts {0:?}")]
    HeterogeneousBatch(Vec<u16>),
    #[error("checkpoint digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("single-class labels")]
    SingleClass,
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("all differences are zero")]
    AllZero,
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("invalid finite-difference step {0}")]
    InvalidEps(f64),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
