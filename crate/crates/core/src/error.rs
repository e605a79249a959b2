use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error in {op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("backward called twice on the same tape without reset")]
    DoubleBackward,

    #[error("non-finite gradient in parameter `{param}` at element {index}")]
    NonFiniteGradient { param: String, index: usize },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f32 },

    #[error("cannot quantise non-finite value at flat index {index}")]
    NonFiniteInput { index: usize },

    #[error("invalid quantised tensor: {0}")]
    Format(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("speaker overlap between pretraining and adaptation sets: {0:?}")]
    SpeakerOverlap(Vec<u32>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),

    #[error("unknown dtype tag {tag} for tensor `{tensor}`")]
    UnknownDtype { tensor: String, tag: u8 },

    #[error("checksum mismatch in tensor `{0}`")]
    CorruptTensor(String),

    #[error("checkpoint tensor `{0}` does not match the model layout")]
    Layout(String),

    #[error("metadata error: {0}")]
    Metadata(#[from] serde_json::Error),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteInput { .. }
        )
    }
}
