//! Sim-to-real LiDAR point cloud translation.
//!
//! A synthetic scan is translated in three stages: an appearance generator
//! moves points of the up-sampled cloud, a sparsity generator learns which
//! range-image pixels a real sensor would return, and fusion drops the
//! appearance-translated points whose pixels the sparsity guide empties.
//! Labels are carried over from the original scan by nearest neighbor.
//!
//! The [`simulator`] module produces labeled scans from primitive scenes and
//! manufactures pseudo-real target domains with known degradations, so each
//! stage can be exercised end to end without external datasets.

pub mod cloud;
pub mod error;
pub mod fusion;
pub mod kdtree;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod projection;
pub mod sampling;
pub mod simulator;

pub use cloud::{LabeledCloud, PointCloud, SemanticClassMap};
pub use error::{PctError, Result};
pub use projection::{BeamModel, RangeImage};
