//! Hand-eye calibration `A·X = X·B` for the tracked camera.
//!
//! `A` are relative motions of the camera marker body seen by the tracker and
//! `B` the matching relative motions of the calibration pattern seen by the
//! camera, both taken with respect to the first synchronized frame.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::axis::rotation_from_covariance;
use super::CalibrationError;
use crate::geometry::{rotation_log, RigidTransform};

/// Maximum timestamp gap when pairing tracker and pattern poses (s).
pub const DEFAULT_PAIRING_WINDOW_S: f64 = 0.015;

/// Rotation angles below this carry no usable axis (rad).
const AXIS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionPair {
    /// Tracker-side relative motion `F_cb[0]⁻¹·F_cb[t]`.
    pub a: RigidTransform,
    /// Pattern-side relative motion `F_u[0]·F_u[t]⁻¹` (pattern in camera).
    pub b: RigidTransform,
    pub timestamp: f64,
}

impl MotionPair {
    /// `angle(a) − angle(b)` in radians; zero for a consistent screw motion.
    pub fn angle_discrepancy(&self) -> f64 {
        self.a.angle() - self.b.angle()
    }
}

fn check_monotone(stream: &[(f64, RigidTransform)], which: &str) -> Result<(), CalibrationError> {
    if stream.iter().any(|(t, _)| !t.is_finite()) {
        return Err(CalibrationError::InvalidInput(format!("{which} timestamps must be finite")));
    }
    if stream.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(CalibrationError::InvalidInput(format!("{which} timestamps are not monotone")));
    }
    Ok(())
}

/// Pairs each tracker pose with the nearest pattern pose within `window_s` and
/// forms relative motions against the first synchronized frame.
pub fn build_motion_pairs(
    tracker_poses: &[(f64, RigidTransform)],
    pattern_poses: &[(f64, RigidTransform)],
    window_s: f64,
) -> Result<Vec<MotionPair>, CalibrationError> {
    let got = tracker_poses.len().min(pattern_poses.len());
    if got < 2 {
        return Err(CalibrationError::InsufficientPoses { needed: 2, got });
    }
    check_monotone(tracker_poses, "tracker")?;
    check_monotone(pattern_poses, "pattern")?;

    let mut synced: Vec<(f64, RigidTransform, RigidTransform)> = Vec::new();
    for (t, cb) in tracker_poses {
        let idx = pattern_poses.partition_point(|(tp, _)| tp < t);
        let best = [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter_map(|i| pattern_poses.get(i))
            .min_by(|x, y| (x.0 - t).abs().total_cmp(&(y.0 - t).abs()));
        if let Some((tp, cu)) = best {
            if (tp - t).abs() <= window_s {
                synced.push((*t, *cb, *cu));
            }
        }
    }
    if synced.len() < 2 {
        return Err(CalibrationError::SyncFailure(format!(
            "only {} of {} tracker poses have a pattern pose within {:.1} ms",
            synced.len(),
            tracker_poses.len(),
            window_s * 1e3
        )));
    }

    let (_, cb0, cu0) = synced[0];
    let cb0_inv = cb0.inverse();
    Ok(synced[1..]
        .iter()
        .map(|(t, cb, cu)| MotionPair { a: cb0_inv.compose(cb), b: cu0.compose(&cu.inverse()), timestamp: *t })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    /// Pairs whose tracker-side rotation is below this are dropped (deg).
    pub min_motion_deg: f64,
    /// Consistency gate as a multiple of the median absolute deviation.
    pub mad_factor: f64,
    /// Lower bound on the gate so exact data is not rejected on round-off (deg).
    pub gate_floor_deg: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { min_motion_deg: 1.0, mad_factor: 3.0, gate_floor_deg: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<MotionPair>,
    pub rejected_count: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Screw-angle consistency filter: a rigid `X` conjugates `B` into `A`, so both
/// rotate by the same angle.
pub fn filter_motion_pairs(pairs: &[MotionPair], opts: &FilterOptions) -> Result<FilterOutcome, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::InvalidInput("no motion pairs to filter".into()));
    }
    let min_motion = opts.min_motion_deg.to_radians();
    let moving: Vec<&MotionPair> = pairs.iter().filter(|p| p.a.angle() >= min_motion).collect();
    if moving.is_empty() {
        return Err(CalibrationError::AllRejected);
    }
    let mut d: Vec<f64> = moving.iter().map(|p| p.angle_discrepancy()).collect();
    let center = median(&mut d.clone());
    let mut dev: Vec<f64> = d.iter_mut().map(|x| (*x - center).abs()).collect();
    let mad = median(&mut dev);
    let gate = (opts.mad_factor * mad).max(opts.gate_floor_deg.to_radians());

    let kept: Vec<MotionPair> =
        moving.into_iter().filter(|p| (p.angle_discrepancy() - center).abs() <= gate).copied().collect();
    if kept.is_empty() {
        return Err(CalibrationError::AllRejected);
    }
    Ok(FilterOutcome { rejected_count: pairs.len() - kept.len(), kept })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandEyeResult {
    /// Camera frame in the camera-marker frame.
    pub x: RigidTransform,
    /// RMS angle of `(A·X)⁻¹·(X·B)` over all pairs (deg).
    pub rotation_residual_deg: f64,
    /// RMS translation of `A·X − X·B` over all pairs (mm).
    pub translation_residual_mm: f64,
}

/// Separable solve: rotation from rotation-axis correspondences
/// (`log(R_a) = R_x·log(R_b)`), then translation from
/// `(R_a − I)·t_x = R_x·t_b − t_a`.
pub fn hand_eye_calibrate(pairs: &[MotionPair]) -> Result<HandEyeResult, CalibrationError> {
    if pairs.len() < 2 {
        return Err(CalibrationError::InsufficientPoses { needed: 2, got: pairs.len() });
    }
    let logs: Vec<(Vector3<f64>, Vector3<f64>)> = pairs
        .iter()
        .map(|p| (rotation_log(p.a.rotation()), rotation_log(p.b.rotation())))
        .filter(|(a, b)| a.norm() > AXIS_EPS && b.norm() > AXIS_EPS)
        .collect();
    let Some((first, _)) = logs.first() else {
        return Err(CalibrationError::UnobservableRotation("no pair contains a rotation".into()));
    };
    let first_axis = first.normalize();
    let sin_limit = 1f64.to_radians().sin();
    if !logs.iter().any(|(a, _)| a.normalize().cross(&first_axis).norm() > sin_limit) {
        return Err(CalibrationError::UnobservableRotation("all rotation axes are parallel within 1°".into()));
    }

    let h: Matrix3<f64> = logs.iter().map(|(alpha, beta)| beta * alpha.transpose()).sum();
    let rx = rotation_from_covariance(&h);

    let n = pairs.len();
    let mut m = DMatrix::<f64>::zeros(3 * n, 3);
    let mut rhs = DVector::<f64>::zeros(3 * n);
    for (i, p) in pairs.iter().enumerate() {
        m.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&(p.a.rotation() - Matrix3::identity()));
        rhs.fixed_rows_mut::<3>(3 * i).copy_from(&(rx * p.b.translation() - p.a.translation()));
    }
    let t = m.svd(true, true).solve(&rhs, 1e-12).map_err(|e| CalibrationError::InvalidInput(e.to_string()))?;
    let x = RigidTransform::new(rx, Vector3::new(t[0], t[1], t[2]))
        .map_err(|e| CalibrationError::InvalidInput(e.to_string()))?;

    let (rot_sq, trans_sq) = pairs.iter().fold((0.0, 0.0), |(r, t), p| {
        let ax = p.a.compose(&x);
        let xb = x.compose(&p.b);
        (r + ax.inverse().compose(&xb).angle().powi(2), t + (ax.translation() - xb.translation()).norm_squared())
    });
    Ok(HandEyeResult {
        x,
        rotation_residual_deg: (rot_sq / n as f64).sqrt().to_degrees(),
        translation_residual_mm: (trans_sq / n as f64).sqrt(),
    })
}
