//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, MqError>;

/// Errors produced by tensor math, model execution, transforms, and file I/O.
#[derive(Debug, Error)]
pub enum MqError {
    /// Two tensors (or a tensor and an operation) disagree on shape.
    #[error("shape mismatch: {context} (left {left:?}, right {right:?})")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A square matrix was required.
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    /// Input to the symmetric eigensolver is not symmetric within tolerance.
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {asymmetry:.3e}")]
    NonSymmetric { asymmetry: f64 },

    /// The Jacobi sweep limit was reached before the off-diagonal norm
    /// dropped below tolerance.
    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal residual {residual:.3e})")]
    NotConverged { sweeps: usize, residual: f64 },

    /// A statistic that needs at least two samples got fewer.
    #[error("need at least 2 rows for {what}, got {rows}")]
    TooFewRows { what: &'static str, rows: usize },

    /// A model or quantizer configuration violates its invariants.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Requested Hadamard order has no supported construction.
    #[error("unsupported Hadamard order {order}: supported orders are 2^k, 2^k*12, and 2^k*20 (k >= 0, with 4 | 2^k for the 12/20 bases)")]
    UnsupportedHadamardOrder { order: usize },

    /// A tap name outside the recognized set was requested.
    #[error("unknown tap name: {0}")]
    UnknownTap(String),

    /// A tap is missing from collected calibration statistics.
    #[error("tap {0} has no collected statistics")]
    MissingTap(String),

    /// A smoothing or scale vector contained a non-positive entry.
    #[error("{what} must be strictly positive (entry {index} = {value})")]
    NonPositive {
        what: &'static str,
        index: usize,
        value: f64,
    },

    /// A transform precondition was violated.
    #[error("transform precondition failed: {0}")]
    TransformPrecondition(String),

    /// Structural corruption in a container or calibration file.
    #[error("{path}: {kind}")]
    Format { path: String, kind: FormatError },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (plan / report) serialization or parsing failure.
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// The corruption classes rejected by the container readers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic (expected {expected})")]
    BadMagic { expected: &'static str },
    #[error("version mismatch (expected {expected}, found {found})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload (need {needed} bytes, have {have})")]
    TruncatedPayload { needed: u64, have: u64 },
    #[error("overlapping entries ({first} and {second})")]
    OverlappingEntries { first: String, second: String },
    #[error("duplicate entry name {0}")]
    DuplicateName(String),
    #[error("entry {name}: {reason}")]
    BadEntry { name: String, reason: String },
    #[error("non-finite value in payload of {0}")]
    NonFinite(String),
}

impl MqError {
    pub(crate) fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        MqError::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MqError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<String>, kind: FormatError) -> Self {
        MqError::Format { path: path.into(), kind }
    }
}
