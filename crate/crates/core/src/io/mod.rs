//! Datasets, checkpoints and image files.

pub mod checkpoint;
pub mod dataset;
pub mod png;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{load_dataset, load_poses, write_dataset, Dataset, Frame, Manifest, MediumTruth};
pub use png::{read_depth, read_image, read_linear16, write_depth, write_image, write_linear16};
