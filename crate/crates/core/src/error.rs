use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("no background images supplied")]
    EmptyBackgrounds,

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("cannot decode image {}: {reason}", .path.display())]
    UndecodableImage { path: PathBuf, reason: String },

    #[error("duplicate id `{0}` in manifest")]
    DuplicateId(String),

    #[error("image {id} is {height}x{width}, smaller than the {patch}x{patch} patch")]
    ImageSmallerThanPatch { id: String, height: usize, width: usize, patch: usize },

    #[error("input size {height}x{width} is not divisible by 32")]
    NonDivisibleInput { height: usize, width: usize },

    #[error("shape inconsistency: {0}")]
    ShapeInconsistency(String),

    #[error("discriminator expects {expected}x{expected} input, got {height}x{width}")]
    WrongInputSize { expected: usize, height: usize, width: usize },

    #[error("probability outside [0, 1]: {0}")]
    Domain(f64),

    #[error("stage invariant violated: {0}")]
    StageInvariant(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, last_checkpoint: Option<PathBuf> },

    #[error("image is {height}x{width}; SSIM needs at least 11x11")]
    ImageTooSmall { height: usize, width: usize },

    #[error("result/truth id mismatch: {}", .0.join(", "))]
    IdMismatch(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest parse error at line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
