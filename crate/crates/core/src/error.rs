//! Error vocabulary shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file does not start with the expected magic bytes (found {found:?})")]
    MagicMismatch { found: [u8; 4] },

    #[error("malformed header: {0}")]
    HeaderParse(String),

    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("non-finite value at flat payload index {index}")]
    NonFiniteValue { index: usize },

    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("index out of range: {what} = {index}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("class {class} is empty but the operation needs both classes")]
    EmptyClass { class: u8 },

    #[error("training diverged: loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("dataset geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("selector matched no samples")]
    EmptySelection,

    #[error("matrix is not symmetric: max |A - Aᵀ| = {asymmetry}")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is indefinite beyond tolerance: min eigenvalue {min_eigenvalue}")]
    IndefiniteBeyondTolerance { min_eigenvalue: f64 },

    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("probe direction is zero; the head classifier is constant")]
    DegenerateNormal,

    #[error("numerical failure in solver: {0}")]
    NumericalFailure(String),

    #[error("solution status is {status}, not optimal")]
    NotOptimal { status: &'static str },

    #[error("covariance is singular beyond the eigenvalue floor (min eigenvalue {min_eigenvalue})")]
    SingularCovariance { min_eigenvalue: f64 },

    #[error("no viable layer: every layer's probe is degenerate")]
    NoViableLayer,

    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),

    #[error("unsupported format version {found}")]
    VersionUnsupported { found: u32 },

    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
}

impl Error {
    /// Stable machine-readable name for the error kind, used by the CLI's
    /// structured JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MagicMismatch { .. } => "MagicMismatch",
            Error::HeaderParse(_) => "HeaderParse",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::IoFailure(_) => "IoFailure",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::EmptyClass { .. } => "EmptyClass",
            Error::Diverged { .. } => "Diverged",
            Error::GeometryMismatch(_) => "GeometryMismatch",
            Error::EmptySelection => "EmptySelection",
            Error::NotSymmetric { .. } => "NotSymmetric",
            Error::IndefiniteBeyondTolerance { .. } => "IndefiniteBeyondTolerance",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::DegenerateNormal => "DegenerateNormal",
            Error::NumericalFailure(_) => "NumericalFailure",
            Error::NotOptimal { .. } => "NotOptimal",
            Error::SingularCovariance { .. } => "SingularCovariance",
            Error::NoViableLayer => "NoViableLayer",
            Error::BadSpec(_) => "BadSpec",
            Error::VersionUnsupported { .. } => "VersionUnsupported",
            Error::ChecksumMismatch(_) => "ChecksumMismatch",
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
