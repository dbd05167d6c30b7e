use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("payload length {actual} does not match header (expected {expected})")]
    PayloadMismatch { expected: usize, actual: usize },
    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The mask has no foreground on the requested slice; callers skip it.
    #[error("empty slice: z={z} class={class_id}")]
    EmptySlice { z: usize, class_id: u8 },
    #[error("mask is empty for class {0}")]
    EmptyMask(u8),

    #[error("template must contain the [CLS] placeholder exactly once, found {0}")]
    Placeholder(usize),
    #[error("prompt {0:?} missing from embedding file")]
    MissingPrompt(String),
    #[error("class {0} missing from embedding table")]
    MissingClass(u8),
    #[error("zero-norm vector at index {0}")]
    ZeroNorm(usize),

    #[error("point lies within {distance:e} of a hinge kink (pair {i},{j})")]
    NearKink { i: usize, j: usize, distance: f64 },

    #[error("undefined coefficient: {0}")]
    Undefined(String),
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("insufficient group: {0}")]
    InsufficientGroup(String),
    #[error("missing metadata: {0}")]
    MissingMetadata(String),
    #[error("mixed selector methods in one call")]
    MixedMethods,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io { path: path.into(), source }
    }
}
