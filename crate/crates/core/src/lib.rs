//! Synthetic assembly-state change data: quaternion pose metrics, a part
//! catalog with connected-state sampling, a deterministic box rasterizer,
//! pair-dataset generation with a checksummed manifest, and a stratified
//! change-IoU evaluation harness.

pub mod assembly;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod par;
pub mod render;

pub use assembly::{AssemblyState, PartCatalog, PartDiff, StateConstraints};
pub use geometry::{CameraPose, Interval, IntervalSet, PoseRange, Quaternion};
pub use image::{BinaryMask, InstanceMap, RgbImage};
