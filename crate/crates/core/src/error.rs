use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no input points and no random fallback configured")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in group `{group}` at index {index}")]
    NonFiniteGradient { group: &'static str, index: usize },
    #[error("dataset has no training views")]
    EmptyDataset,
    #[error("ground truth radiance is not available for view {0}")]
    MissingGroundTruth(usize),
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),
    #[error("image not found: {0}")]
    MissingImage(PathBuf),
    #[error("bad pose for frame {frame}: {reason}")]
    BadPose { frame: usize, reason: String },
    #[error("size mismatch for {path}: manifest says {expected:?}, file has {found:?}")]
    SizeMismatch { path: PathBuf, expected: (usize, usize), found: (usize, usize) },
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("image encode failed for {path}: {reason}")]
    Encode { path: PathBuf, reason: String },
    #[error("image decode failed for {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("no probe instance with clear gate margins after {attempts} attempts")]
    NoProbeInstance { attempts: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
