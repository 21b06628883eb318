use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the localization / editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("singular textual attention matrix; increase epsilon")]
    SingularMatrix,

    #[error("percentile {0} outside [0, 100]")]
    InvalidPercentile(f64),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric overflow in layer {0}")]
    NumericOverflow(usize),

    #[error("degenerate self-attention row {0}")]
    DegenerateRow(usize),

    #[error("empty attention record list")]
    NoRecords,

    #[error("token selection is empty")]
    EmptySelection,

    #[error("token index {index} out of range for {n_text} text tokens")]
    SelectionOutOfRange { index: usize, n_text: usize },

    #[error("non-finite latent at step {0}")]
    NonFiniteLatent(usize),

    #[error("trace mismatch: {0}")]
    TraceMismatch(String),

    #[error("empty evaluation region")]
    EmptyRegion,

    #[error("image {width}x{height} smaller than the {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("manifest error{}: {message}", item.as_ref().map(|i| format!(" in item `{i}`")).unwrap_or_default())]
    Manifest {
        item: Option<String>,
        message: String,
    },

    #[error("mask {path}: {message}")]
    Mask { path: PathBuf, message: String },

    #[error("tensor file: {0}")]
    TensorFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
