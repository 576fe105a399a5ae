//! Voxel-level pseudo-labels for 3D scans from slice-level labels only.
//!
//! A slice classifier is explained with integrated gradients, the explanation
//! is thresholded into a segmentation, the segmented voxels are masked out and
//! the slice is explained again until the classifier stops firing.

pub mod attribution;
pub mod classifier;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod volume;

pub use error::{Error, Result};
