//! Multi-view 3D crowd counting at desk scale.
//!
//! The pipeline: per-view CNN features are lifted onto a stack of world
//! height planes by a fixed differentiable projection, fused by 3D
//! convolutions into a scene-level 3D density map whose sum is the crowd
//! count, and refined by a projection-consistency loss that compares the
//! back-projected 3D prediction against each camera view's ground truth.
//!
//! Crates of interest:
//! - [`tensor`] / [`tape`]: dense tensors and reverse-mode differentiation
//! - [`camera`]: pinhole cameras and ray/plane geometry
//! - [`projection`]: 2D->3D multi-height projection and 3D->2D masks
//! - [`ground_truth`]: triangulation and Gaussian density splatting
//! - [`losses`]: 2D/3D MSE, PCM and the staged combined loss
//! - [`model`]: the full network forward pass and checkpoints
//! - [`scene`]: synthetic multi-camera scene generation and rendering
//! - [`train`]: training loop, optimizer and evaluation metrics

pub mod camera;
pub mod ground_truth;
pub mod losses;
pub mod model;
pub mod projection;
pub mod scene;
pub mod t3dc;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use camera::{CameraParams, GeometryError, WorldPoint};
pub use tape::{NodeId, Tape, VoxelLookup};
pub use tensor::{Tensor, TensorError};
pub use voxel::VoxelGridSpec;
