//! Digital twin of tracked volumetric drilling.
//!
//! Pose chains for a tracked drill, anatomy phantom and camera are calibrated
//! ([`calibration`]) and composed ([`geometry`]); a voxel anatomy model
//! ([`volume`]) is carved by the tracked burr in real time ([`engine`]);
//! label masks and distance overlays are ray-cast from the tracked camera
//! ([`camera`]); and first-order worst-case error budgets are computed for the
//! drill-to-phantom chain ([`error_budget`]).

pub mod calibration;
pub mod camera;
pub mod cloud;
pub mod engine;
pub mod error_budget;
pub mod geometry;
pub mod synth;
pub mod volume;

pub use cloud::PointCloud;
pub use geometry::{ErrorTwist, RigidTransform};
pub use volume::VoxelVolume;
