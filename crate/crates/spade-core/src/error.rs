//! Crate-wide error type.
//!
//! Every error carries a stable machine-readable code (see [`SpadeError::code`])
//! so that command-line consumers can dispatch on failures without parsing
//! human-oriented messages.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SpadeError>;

/// All failure modes of the library.
#[derive(Debug, Error)]
pub enum SpadeError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("non-finite value in record {record}, component {component}")]
    NonFiniteValue { record: usize, component: usize },

    #[error("dataset contains no records")]
    EmptyDataset,

    #[error("unsupported model schema version {0}")]
    SchemaMismatch(u32),

    #[error("cannot normalize a vector with norm below 1e-300")]
    ZeroVector,

    #[error("class {class} has {size} members, need at least {needed}")]
    InsufficientClassSize {
        class: usize,
        size: usize,
        needed: usize,
    },

    #[error("operation requires at least two classes")]
    SingleClass,

    #[error("duplicate input vectors (zero denominator in ratio)")]
    DuplicateInput,

    #[error("probability {0} outside the valid range")]
    InvalidProbability(f64),

    #[error("{count} strict exceedances above the threshold, need at least {needed}")]
    TooFewExceedances { count: usize, needed: usize },

    #[error("degenerate sample: all values are equal")]
    DegenerateSample,

    #[error("likelihood optimization did not converge from any start")]
    NonConvergence,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unknown class {0}")]
    UnknownClass(usize),

    #[error("tau {0} outside the open interval (0, 1)")]
    InvalidTau(f64),

    #[error("bundle carries no pairwise separation models")]
    MissingPairModels,

    #[error("score list is empty")]
    EmptyScores,

    #[error("fingerprint mismatch: model was fitted on {expected}, dataset hashes to {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("missing prediction for query id {0:?}")]
    MissingPrediction(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fitting class {class}: {source}")]
    ClassFit {
        class: usize,
        #[source]
        source: Box<SpadeError>,
    },

    #[error("fitting pair ({}, {}): {source}", pair.0, pair.1)]
    PairFit {
        pair: (usize, usize),
        #[source]
        source: Box<SpadeError>,
    },

    #[error("stability cell (fraction {fraction}, seed {seed}): {source}")]
    StudyCell {
        fraction: f64,
        seed: u64,
        #[source]
        source: Box<SpadeError>,
    },
}

impl SpadeError {
    /// Unwrap context wrappers down to the causing error.
    pub fn root(&self) -> &SpadeError {
        match self {
            SpadeError::ClassFit { source, .. }
            | SpadeError::PairFit { source, .. }
            | SpadeError::StudyCell { source, .. } => source.root(),
            other => other,
        }
    }

    /// Stable machine-readable code for the root cause.
    pub fn code(&self) -> &'static str {
        match self.root() {
            SpadeError::Io(_) => "IO",
            SpadeError::MalformedFile(_) => "MALFORMED_FILE",
            SpadeError::NonFiniteValue { .. } => "NON_FINITE_VALUE",
            SpadeError::EmptyDataset => "EMPTY_DATASET",
            SpadeError::SchemaMismatch(_) => "SCHEMA_MISMATCH",
            SpadeError::ZeroVector => "ZERO_VECTOR",
            SpadeError::InsufficientClassSize { .. } => "INSUFFICIENT_CLASS_SIZE",
            SpadeError::SingleClass => "SINGLE_CLASS",
            SpadeError::DuplicateInput => "DUPLICATE_INPUT",
            SpadeError::InvalidProbability(_) => "INVALID_PROBABILITY",
            SpadeError::TooFewExceedances { .. } => "TOO_FEW_EXCEEDANCES",
            SpadeError::DegenerateSample => "DEGENERATE_SAMPLE",
            SpadeError::NonConvergence => "NON_CONVERGENCE",
            SpadeError::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            SpadeError::UnknownClass(_) => "UNKNOWN_CLASS",
            SpadeError::InvalidTau(_) => "INVALID_TAU",
            SpadeError::MissingPairModels => "MISSING_PAIR_MODELS",
            SpadeError::EmptyScores => "EMPTY_SCORES",
            SpadeError::FingerprintMismatch { .. } => "FINGERPRINT_MISMATCH",
            SpadeError::MissingPrediction(_) => "MISSING_PREDICTION",
            SpadeError::InvalidParameter(_) => "VALIDATION",
            // Wrappers are unreachable after root().
            SpadeError::ClassFit { .. }
            | SpadeError::PairFit { .. }
            | SpadeError::StudyCell { .. } => "VALIDATION",
        }
    }
}
