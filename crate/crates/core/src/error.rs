use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a value that does not depend on any trainable input")]
    Detached,

    #[error("backward already ran on this tape; build a new tape after zeroing grads")]
    BackwardTwice,

    #[error("token id {id} is out of vocabulary (size {vocab})")]
    OutOfVocab { id: u32, vocab: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("matching provider has not been pretrained")]
    UntrainedProvider,

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("non-finite gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("non-finite loss at epoch {epoch}")]
    NanLoss { epoch: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("variant {variant} does not match model weights: {msg}")]
    VariantMismatch { variant: String, msg: String },

    #[error("unknown item id {0}")]
    UnknownItem(u64),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
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
}
