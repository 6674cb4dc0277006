//! Non-learned pipeline of an anchor-free, single-stage LiDAR 3D detector.
//!
//! The crate covers everything around the network: voxelizing point clouds and
//! planning feature-map shapes, encoding ground truth into heatmap and regression
//! targets, the per-head losses with analytic gradients, decoding head outputs into
//! boxes with IoU-aware rescoring and class-specific rotated NMS, test-time
//! augmentation and box fusion, training-time scene augmentation, AP/APH evaluation,
//! and a synthetic scene and detector simulator for exercising all of it.

pub mod augment;
pub mod config;
pub mod decode;
pub mod detio;
pub mod encode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod pointcloud;
pub mod sim;
pub mod tta;

pub use error::{Error, Result};
pub use geometry::Box3D;
