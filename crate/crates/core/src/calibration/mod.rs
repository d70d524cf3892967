//! Calibration solvers for the three tracked pose chains.
//!
//! * [`pivot`]: tool-tip offset from rotations about a fixed point.
//! * [`axis`]: shaft direction from paired straight-line trajectories (Kabsch).
//! * [`icp`]: point-to-plane registration of sampled surface points to the model.
//! * [`handeye`]: `A·X = X·B` for the camera mount, with motion-pair construction
//!   and consistency filtering.

pub mod axis;
pub mod handeye;
pub mod icp;
pub mod pivot;

use thiserror::Error;

use crate::cloud::CloudError;

pub use axis::{
    closed_form_rotation, kabsch_axis_calibrate, kabsch_rotation, rotation_from_covariance, AxisCalibration,
    TrajectoryPair,
};
pub use handeye::{
    build_motion_pairs, filter_motion_pairs, hand_eye_calibrate, FilterOptions, FilterOutcome, HandEyeResult,
    MotionPair, DEFAULT_PAIRING_WINDOW_S,
};
pub use icp::{icp_point_to_plane, principal_axes_hypotheses, register, IcpOptions, IcpResult};
pub use pivot::{pivot_calibrate, PivotResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("DegenerateMotion: pivot system is ill-conditioned (condition number {0:e})")]
    DegenerateMotion(f64),
    #[error("DegenerateTrajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("EmptyCloud: point cloud has no points")]
    EmptyCloud,
    #[error("NoCorrespondences: no source point lies within {0} mm of the target")]
    NoCorrespondences(f64),
    #[error("InsufficientPoses: need at least {needed}, got {got}")]
    InsufficientPoses { needed: usize, got: usize },
    #[error("SyncFailure: {0}")]
    SyncFailure(String),
    #[error("AllRejected: every motion pair failed the consistency gates")]
    AllRejected,
    #[error("UnobservableRotation: {0}")]
    UnobservableRotation(String),
    #[error("InvalidInput: {0}")]
    InvalidInput(String),
}

impl CalibrationError {
    /// Short variant name, as printed by the command-line tools.
    pub fn name(&self) -> &'static str {
        match self {
            Self::DegenerateMotion(_) => "DegenerateMotion",
            Self::DegenerateTrajectory(_) => "DegenerateTrajectory",
            Self::EmptyCloud => "EmptyCloud",
            Self::NoCorrespondences(_) => "NoCorrespondences",
            Self::InsufficientPoses { .. } => "InsufficientPoses",
            Self::SyncFailure(_) => "SyncFailure",
            Self::AllRejected => "AllRejected",
            Self::UnobservableRotation(_) => "UnobservableRotation",
            Self::InvalidInput(_) => "InvalidInput",
        }
    }
}

impl From<CloudError> for CalibrationError {
    fn from(e: CloudError) -> Self {
        match e {
            CloudError::EmptyCloud => Self::EmptyCloud,
            CloudError::InvalidNormals(m) => Self::InvalidInput(m),
        }
    }
}
