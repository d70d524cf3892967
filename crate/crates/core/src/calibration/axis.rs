//! Shaft-axis rotation from two straight-line trajectories.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::CalibrationError;
use crate::cloud::centroid;
use crate::geometry::minimal_rotation;

/// Minimum ratio of first to second singular value for a trajectory to count
/// as a line.
pub const MIN_LINE_RATIO: f64 = 10.0;

/// Minimum extent of each trajectory along its fitted direction (mm).
pub const MIN_SPAN_MM: f64 = 1.0;

/// Paired samples of the same motion: `p` in shaft-axis coordinates, `q` as
/// tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    p_points: Vec<Vector3<f64>>,
    q_points: Vec<Vector3<f64>>,
}

impl TrajectoryPair {
    pub fn new(p_points: Vec<Vector3<f64>>, q_points: Vec<Vector3<f64>>) -> Result<Self, CalibrationError> {
        if p_points.len() != q_points.len() {
            return Err(CalibrationError::InvalidInput(format!(
                "trajectory lengths differ: {} vs {}",
                p_points.len(),
                q_points.len()
            )));
        }
        if p_points.len() < 2 {
            return Err(CalibrationError::InsufficientPoses { needed: 2, got: p_points.len() });
        }
        if p_points.iter().chain(&q_points).any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(CalibrationError::InvalidInput("non-finite trajectory sample".into()));
        }
        Ok(Self { p_points, q_points })
    }

    pub fn p_points(&self) -> &[Vector3<f64>] {
        &self.p_points
    }

    pub fn q_points(&self) -> &[Vector3<f64>] {
        &self.q_points
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisCalibration {
    pub rotation: Matrix3<f64>,
    pub p_direction: Vector3<f64>,
    pub q_direction: Vector3<f64>,
}

struct LineFit {
    direction: Vector3<f64>,
    centered: Vec<Vector3<f64>>,
}

fn fit_line(points: &[Vector3<f64>], which: &str) -> Result<LineFit, CalibrationError> {
    let mean = centroid(points).expect("non-empty trajectory");
    let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - mean).collect();
    let rows = DMatrix::from_fn(centered.len(), 3, |r, c| centered[r][c]);
    let svd = rows.svd(false, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s1 = svd.singular_values[order[0]];
    let s2 = order.get(1).map_or(0.0, |&i| svd.singular_values[i]);
    if !(s1 > 0.0) || s1 < MIN_LINE_RATIO * s2 {
        return Err(CalibrationError::DegenerateTrajectory(format!(
            "{which} trajectory is not line-like (singular values {s1:.3e}, {s2:.3e})"
        )));
    }
    let v_t = svd.v_t.expect("requested");
    let k = order[0];
    let direction = Vector3::new(v_t[(k, 0)], v_t[(k, 1)], v_t[(k, 2)]).normalize();
    let proj: Vec<f64> = centered.iter().map(|c| c.dot(&direction)).collect();
    let span =
        proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - proj.iter().cloned().fold(f64::INFINITY, f64::min);
    if span < MIN_SPAN_MM {
        return Err(CalibrationError::DegenerateTrajectory(format!("{which} trajectory spans only {span:.3} mm")));
    }
    Ok(LineFit { direction, centered })
}

/// Rotation taking the fitted direction of `P` onto that of `Q`.
///
/// Rotation about the shaft itself is unobservable from line trajectories; the
/// result is the minimal rotation (axis perpendicular to both directions).
pub fn kabsch_axis_calibrate(traj: &TrajectoryPair) -> Result<AxisCalibration, CalibrationError> {
    let p = fit_line(&traj.p_points, "P")?;
    let q = fit_line(&traj.q_points, "Q")?;
    // Orient Q's direction so that progress along both lines correlates.
    let corr: f64 = p.centered.iter().zip(&q.centered).map(|(a, b)| a.dot(&p.direction) * b.dot(&q.direction)).sum();
    let q_direction = if corr < 0.0 { -q.direction } else { q.direction };
    Ok(AxisCalibration {
        rotation: minimal_rotation(&p.direction, &q_direction),
        p_direction: p.direction,
        q_direction,
    })
}

/// Best rotation `R` with `q ≈ R·p` for a cross-covariance `H = Σ p·qᵀ`,
/// via SVD with determinant correction.
pub fn rotation_from_covariance(h: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose()
}

/// Literal `(HᵀH)^{1/2}·H⁻¹`; `None` when `H` is singular.
pub fn closed_form_rotation(h: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let inv = h.try_inverse()?;
    let eig = (h.transpose() * h).symmetric_eigen();
    let sqrt = eig.eigenvectors
        * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
        * eig.eigenvectors.transpose();
    Some(sqrt * inv)
}

/// Kabsch alignment of general corresponding point sets: rotation `R` with
/// `q_i − q̄ ≈ R·(p_i − p̄)`.
pub fn kabsch_rotation(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<Matrix3<f64>, CalibrationError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(CalibrationError::InvalidInput("point sets must be non-empty and equal in length".into()));
    }
    let (pc, qc) = (centroid(p).unwrap(), centroid(q).unwrap());
    let h: Matrix3<f64> = p.iter().zip(q).map(|(a, b)| (a - pc) * (b - qc).transpose()).sum();
    let r = rotation_from_covariance(&h);
    #[cfg(debug_assertions)]
    if let Some(cf) = well_conditioned_closed_form(&h) {
        debug_assert!((cf - r).amax() < 1e-9, "closed form disagrees with SVD solution");
    }
    Ok(r)
}

#[cfg(debug_assertions)]
fn well_conditioned_closed_form(h: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let s = h.singular_values();
    let cond = s.max() / s.min();
    (h.determinant() > 0.0 && cond < 1e4).then(|| closed_form_rotation(h)).flatten()
}
