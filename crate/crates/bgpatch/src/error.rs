//! Crate-wide error type.

use thiserror::Error;

/// Unified error for geometry, detector, attack, and harness operations.
#[derive(Debug, Error)]
pub enum BgError {
    /// A box, patch, or config value violated a structural requirement.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Array/image dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A patch rectangle escapes the image bounds.
    #[error("patch out of bounds: {0}")]
    PatchOutOfBounds(String),

    /// Two patches overlap, or a patch overlaps a ground-truth box.
    #[error("patch overlap: {0}")]
    PatchOverlap(String),

    /// Every enabled loss term has an empty selection, so no gradient is
    /// defined. The attack loop decides what termination this implies.
    #[error("no active loss term (all selections empty)")]
    NoActiveLoss,

    /// PSNR is undefined because the mask selects no pixels.
    #[error("PSNR undefined: empty pixel mask")]
    EmptyMask,

    /// Toy-model training produced non-finite losses.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// Weight file rejected (bad magic, version, or architecture mismatch).
    #[error("weight file error: {0}")]
    WeightFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, BgError>;
