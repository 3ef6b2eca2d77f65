//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("row {index} of {side} has near-zero norm ({norm:e})")]
    ZeroNormRow {
        side: &'static str,
        index: usize,
        norm: f64,
    },

    #[error("row {row} is not a probability distribution (sum = {sum})")]
    NotNormalized { row: usize, sum: f64 },

    #[error("entry {value:e} in row {row} is below the floor {floor:e} and clamping is disabled")]
    BelowFloor { row: usize, value: f64, floor: f64 },

    #[error("finite-difference step {0:e} outside [1e-7, 1e-4]")]
    BadStepSize(f64),

    // Tensor file format errors, one variant per failure mode.
    #[error("bad magic bytes (expected \"BTEN\")")]
    BadMagic,
    #[error("unsupported tensor format version {0}")]
    BadVersion(u32),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("unknown role tag {0}")]
    BadRole(u8),
    #[error("header checksum mismatch")]
    BadChecksum,
    #[error("dimension overflow in header: {0:?}")]
    DimOverflow(Vec<u64>),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSize { expected: u64, found: u64 },

    #[error("pairing mismatch: {0}")]
    PairingMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(
        "evidence pre-activation {max:.2} exceeds {limit}; rescale the input \
         (semantic channels are expected to be L2-normalized)"
    )]
    EvidenceOverflow { max: f64, limit: f64 },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("checkpoint manifest is missing parameter \"{0}\"")]
    MissingParam(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
