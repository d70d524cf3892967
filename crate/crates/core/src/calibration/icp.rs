//! Point-to-plane ICP.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use super::CalibrationError;
use crate::cloud::{NearestNeighbors, PointCloud};
use crate::geometry::{rotation_exp, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpOptions {
    pub max_iter: usize,
    /// Stop once the residual improves by less than this (mm).
    pub tol: f64,
    /// Correspondences farther apart than this are ignored (mm).
    pub max_correspondence_distance: f64,
    /// Neighbourhood size for target normal estimation.
    pub normal_neighbours: usize,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-9, max_correspondence_distance: 5.0, normal_neighbours: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source coordinates into target coordinates.
    pub transform: RigidTransform,
    pub residual_rms: f64,
    pub iterations: usize,
    /// False when `max_iter` was reached while still improving by ≥ `tol`.
    pub converged: bool,
    /// Residual at the initial pose followed by one entry per iteration.
    pub residual_history: Vec<f64>,
    pub inliers: usize,
}

struct Evaluation {
    rms: f64,
    /// (transformed source point, target point, target normal)
    matches: Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>)>,
}

fn evaluate(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    index: &NearestNeighbors,
    pose: &RigidTransform,
    max_dist: f64,
) -> Option<Evaluation> {
    let mut matches = Vec::with_capacity(source.len());
    let mut sq = 0.0;
    for s in source {
        let p = pose.transform_point(s);
        let (j, d) = index.nearest(&p);
        if d <= max_dist {
            let r = normals[j].dot(&(p - target[j]));
            sq += r * r;
            matches.push((p, target[j], normals[j]));
        }
    }
    if matches.is_empty() {
        return None;
    }
    Some(Evaluation { rms: (sq / matches.len() as f64).sqrt(), matches })
}

/// Linearized point-to-plane step `[ω, v]` about the current pose.
fn solve_step(eval: &Evaluation) -> Vector6<f64> {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    for (p, t, n) in &eval.matches {
        let r = n.dot(&(p - t));
        let c = p.cross(n);
        let j = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
        jtj += j * j.transpose();
        jtr += j * r;
    }
    // Sliding directions on symmetric surfaces leave JᵀJ rank-deficient; take
    // the minimum-norm step.
    jtj.svd(true, true).solve(&(-jtr), 1e-12).unwrap_or_else(|_| Vector6::zeros())
}

fn apply_step(pose: &RigidTransform, step: &Vector6<f64>, scale: f64) -> RigidTransform {
    let w = Vector3::new(step[0], step[1], step[2]) * scale;
    let v = Vector3::new(step[3], step[4], step[5]) * scale;
    let delta = RigidTransform::new(rotation_exp(&w), v).expect("exponential is a rotation");
    delta.compose(pose)
}

/// Registers `source` onto `target`, starting from `init`.
///
/// Target normals are estimated when absent. Each accepted iteration never
/// increases the residual: a step that would is halved up to eight times,
/// after which the solve stops.
pub fn icp_point_to_plane(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    opts: &IcpOptions,
) -> Result<IcpResult, CalibrationError> {
    if source.is_empty() || target.is_empty() {
        return Err(CalibrationError::EmptyCloud);
    }
    let target = target.ensure_normals(opts.normal_neighbours)?;
    let normals = target.normals().expect("ensured");
    let index = NearestNeighbors::new(target.points())?;
    let eval_at = |pose: &RigidTransform| {
        evaluate(source.points(), target.points(), normals, &index, pose, opts.max_correspondence_distance)
    };

    let mut pose = *init;
    let mut current = eval_at(&pose).ok_or(CalibrationError::NoCorrespondences(opts.max_correspondence_distance))?;
    let mut history = vec![current.rms];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let step = solve_step(&current);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..9 {
            let candidate = apply_step(&pose, &step, scale);
            if let Some(e) = eval_at(&candidate) {
                if e.rms <= current.rms {
                    accepted = Some((candidate, e));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((candidate, eval)) = accepted else {
            // No descent direction left.
            history.push(current.rms);
            converged = true;
            break;
        };
        let improvement = current.rms - eval.rms;
        pose = candidate;
        current = eval;
        history.push(current.rms);
        if improvement < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(IcpResult {
        transform: pose,
        residual_rms: current.rms,
        iterations,
        converged,
        residual_history: history,
        inliers: current.matches.len(),
    })
}

/// Centroid + principal-axes alignments of `source` onto `target`, one per
/// proper sign assignment of the axes (four hypotheses).
pub fn principal_axes_hypotheses(
    source: &PointCloud,
    target: &PointCloud,
) -> Result<Vec<RigidTransform>, CalibrationError> {
    let (frame_s, cs) = principal_frame(source)?;
    let (frame_t, ct) = principal_frame(target)?;
    let mut out = Vec::with_capacity(4);
    for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let flip = Matrix3::from_diagonal(&Vector3::new(a, b, a * b));
        let r = frame_t * flip * frame_s.transpose();
        out.push(RigidTransform::new(r, ct - r * cs).expect("product of proper rotations"));
    }
    Ok(out)
}

/// Eigenvectors of the scatter matrix, sorted by decreasing variance and made
/// right-handed.
fn principal_frame(cloud: &PointCloud) -> Result<(Matrix3<f64>, Vector3<f64>), CalibrationError> {
    let c = cloud.centroid().ok_or(CalibrationError::EmptyCloud)?;
    let cov: Matrix3<f64> = cloud.points().iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut m = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    if m.determinant() < 0.0 {
        m.set_column(2, &(-m.column(2)));
    }
    Ok((m, c))
}

/// ICP from `seed` when given, otherwise from each principal-axes hypothesis,
/// keeping the lowest final residual.
pub fn register(
    source: &PointCloud,
    target: &PointCloud,
    seed: Option<&RigidTransform>,
    opts: &IcpOptions,
) -> Result<IcpResult, CalibrationError> {
    if source.is_empty() || target.is_empty() {
        return Err(CalibrationError::EmptyCloud);
    }
    let target = target.ensure_normals(opts.normal_neighbours)?;
    if let Some(seed) = seed {
        return icp_point_to_plane(source, &target, seed, opts);
    }
    let mut best: Option<IcpResult> = None;
    let mut last_err = None;
    for init in principal_axes_hypotheses(source, &target)? {
        match icp_point_to_plane(source, &target, &init, opts) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.residual_rms < b.residual_rms) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(CalibrationError::EmptyCloud))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn identical_clouds_stay_at_identity() {
        let target = synth::skull_surface(380);
        let r = icp_point_to_plane(&target, &target, &RigidTransform::identity(), &IcpOptions::default()).unwrap();
        assert!(r.transform.max_abs_diff(&RigidTransform::identity()) < 1e-9);
        assert!(r.residual_rms < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn recovers_known_perturbation() {
        let target = synth::skull_surface(380);
        let perturb = RigidTransform::from_axis_angle(Vector3::z(), 5f64.to_radians(), Vector3::new(2.0, 1.0, 0.0));
        let source = target.transformed(&perturb);
        let r = icp_point_to_plane(&source, &target, &RigidTransform::identity(), &IcpOptions::default()).unwrap();
        let expected = perturb.inverse();
        let err = r.transform.compose(&perturb);
        assert!((r.transform.translation() - expected.translation()).norm() < 1e-3, "{:?}", r);
        assert!(err.angle() < 1e-4);
        for w in r.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn empty_source_is_an_error() {
        let target = synth::skull_surface(50);
        let err =
            icp_point_to_plane(&PointCloud::default(), &target, &RigidTransform::identity(), &IcpOptions::default());
        assert_eq!(err.unwrap_err(), CalibrationError::EmptyCloud);
    }

    #[test]
    fn far_source_has_no_correspondences() {
        let target = synth::skull_surface(50);
        let source = target.transformed(&RigidTransform::from_translation(Vector3::new(500.0, 0.0, 0.0)));
        let err = icp_point_to_plane(&source, &target, &RigidTransform::identity(), &IcpOptions::default());
        assert!(matches!(err, Err(CalibrationError::NoCorrespondences(_))));
    }

    #[test]
    fn max_iter_reports_non_convergence() {
        let target = synth::skull_surface(380);
        let perturb = RigidTransform::from_axis_angle(Vector3::z(), 5f64.to_radians(), Vector3::new(2.0, 1.0, 0.0));
        let source = target.transformed(&perturb);
        let opts = IcpOptions { max_iter: 1, tol: 1e-12, ..IcpOptions::default() };
        let r = icp_point_to_plane(&source, &target, &RigidTransform::identity(), &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
        assert!(r.residual_history[1] <= r.residual_history[0]);
    }

    #[test]
    fn hypotheses_recover_large_offsets() {
        let target = synth::skull_surface(600);
        let far = RigidTransform::from_axis_angle(Vector3::new(0.2, 1.0, 0.1), 0.6, Vector3::new(40.0, -30.0, 25.0));
        let source = target.transformed(&far);
        let r = register(&source, &target, None, &IcpOptions::default()).unwrap();
        assert!(r.transform.compose(&far).max_abs_diff(&RigidTransform::identity()) < 1e-6, "{r:?}");
    }
}
