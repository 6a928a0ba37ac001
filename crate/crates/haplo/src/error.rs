//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: shape {shape:?} has no axis {axis}")]
    InvalidAxis {
        op: &'static str,
        shape: Vec<usize>,
        axis: usize,
    },

    #[error("{op}: eps must be > 0, got {eps}")]
    InvalidEps { op: &'static str, eps: f64 },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("image dims {h}x{w} not divisible by patch size {k}")]
    IndivisiblePatch { h: usize, w: usize, k: usize },

    #[error("sequence must contain at least one segment")]
    EmptySequence,

    #[error("invalid state: {0}")]
    State(String),

    #[error("prompt length {prompt} exceeds maximum sequence length {max}")]
    PromptTooLong { prompt: usize, max: usize },

    #[error("word {word:?} not found in prompt; prompt tokens: {prompt_tokens:?}")]
    WordNotFound {
        word: String,
        prompt_tokens: Vec<String>,
    },

    #[error("vocabulary of size {have} too small; need at least {needed} entries")]
    VocabTooSmall { needed: usize, have: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png decode error: {0}")]
    PngDecode(String),
}

impl Error {
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
