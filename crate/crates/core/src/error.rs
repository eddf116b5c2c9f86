use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box [{top},{left},{bottom},{right}] is not valid for a {height}x{width} image")]
    InvalidBox {
        top: i64,
        left: i64,
        bottom: i64,
        right: i64,
        height: usize,
        width: usize,
    },
    #[error("label {0} is not in the palette")]
    UnknownLabel(u8),
    #[error("label {0} is not an editable category")]
    NotEditable(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("covariance is degenerate: {samples} samples for {dim}-dimensional features and no shrinkage")]
    DegenerateCovariance { samples: usize, dim: usize },
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
