//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("wav parse error at byte {offset}: {message}")]
    WavParse { offset: u64, message: String },

    #[error("unsupported wav encoding: {0}")]
    WavUnsupported(String),

    #[error("not a spectrogram file (magic {found:?})")]
    SgrmMagic { found: [u8; 4] },

    #[error("spectrogram file truncated: expected {expected} payload bytes, found {found}")]
    SgrmTruncated { expected: usize, found: usize },

    #[error("spectrogram format: {0}")]
    Sgrm(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
