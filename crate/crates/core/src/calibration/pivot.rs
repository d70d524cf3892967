//! Pivot calibration of a tracked tool tip.

use nalgebra::{DMatrix, DVector, Vector3};

use super::CalibrationError;
use crate::geometry::RigidTransform;

/// Condition number of the 6×6 normal matrix above which the motion is
/// considered degenerate.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotResult {
    /// Tip position in the marker-body frame (mm).
    pub tip_offset: Vector3<f64>,
    /// Fixed pivot point in the tracker frame (mm).
    pub pivot_point: Vector3<f64>,
    pub residual_rms: f64,
    pub condition: f64,
}

/// Least-squares solution of `R_i·tip + p_i = pivot` over all marker poses.
pub fn pivot_calibrate(poses: &[RigidTransform]) -> Result<PivotResult, CalibrationError> {
    if poses.len() < 3 {
        return Err(CalibrationError::InsufficientPoses { needed: 3, got: poses.len() });
    }
    let n = poses.len();
    let mut a = DMatrix::<f64>::zeros(3 * n, 6);
    let mut b = DVector::<f64>::zeros(3 * n);
    for (i, pose) in poses.iter().enumerate() {
        a.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(pose.rotation());
        a.fixed_view_mut::<3, 3>(3 * i, 3).copy_from(&(-nalgebra::Matrix3::identity()));
        b.fixed_rows_mut::<3>(3 * i).copy_from(&(-pose.translation()));
    }

    let normal = a.transpose() * &a;
    let eig = normal.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min <= 0.0 { f64::INFINITY } else { max / min };
    if !(condition <= MAX_CONDITION) {
        return Err(CalibrationError::DegenerateMotion(condition));
    }

    // Solve on the stacked system rather than the normal equations for accuracy.
    let x = a.clone().svd(true, true).solve(&b, 1e-14).map_err(|e| CalibrationError::InvalidInput(e.to_string()))?;
    let tip_offset = Vector3::new(x[0], x[1], x[2]);
    let pivot_point = Vector3::new(x[3], x[4], x[5]);

    let sq: f64 = poses.iter().map(|p| (p.transform_point(&tip_offset) - pivot_point).norm_squared()).sum();
    Ok(PivotResult { tip_offset, pivot_point, residual_rms: (sq / n as f64).sqrt(), condition })
}
