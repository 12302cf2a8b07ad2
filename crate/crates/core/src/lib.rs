//! Omnidirectional Gaussian splatting for underwater 360° panoramas.
//!
//! Gaussians are rendered directly onto equirectangular images by exact
//! ray–splat intersection, optionally corrected per view for appearance
//! changes, and composed with a learned underwater medium model. The whole
//! pipeline is differentiable and trained against raw observations.

pub mod appearance;
pub mod diff;
pub mod erp;
pub mod error;
pub mod image;
pub mod io;
pub mod medium;
pub mod optim;
pub mod probe;
pub mod renderer;
pub mod scene;
pub mod synthbench;

pub use error::{Error, Result};
pub use image::Image;
