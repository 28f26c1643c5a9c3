use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated in {0}")]
    TruncatedHeader(&'static str),

    #[error("file truncated inside record {index}")]
    TruncatedRecord { index: u64 },

    #[error("declared {declared} records but file holds {actual_bytes} payload bytes ({expected_bytes} expected)")]
    LengthMismatch {
        declared: u64,
        expected_bytes: u64,
        actual_bytes: u64,
    },

    #[error("non-finite value in record {record}, component {component}")]
    NonFinite { record: usize, component: usize },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid bank: {0}")]
    InvalidBank(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible episode: {0}")]
    Infeasible(String),

    #[error("mixed classes in support set: {first} and {other}")]
    MixedClasses { first: u32, other: u32 },

    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
