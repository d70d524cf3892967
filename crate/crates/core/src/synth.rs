//! Synthetic data generators used by tests, the CLI `synth` command and the
//! browser demo. Every generator is seeded by the caller's RNG.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::cloud::PointCloud;
use crate::engine::{CalibrationBundle, FrameId, PoseSample};
use crate::geometry::{rotation_exp, RigidTransform};
use crate::volume::VoxelVolume;

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    Vector3::from(UnitSphere.sample(rng))
}

/// Uniformly distributed rotation (random axis, angle with the Haar density).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    // Shoemake's method via a random unit quaternion.
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos()];
    *RigidTransform::from_quaternion_wxyz([q[3], q[0], q[1], q[2]], Vector3::zeros())
        .expect("unit quaternion")
        .rotation()
}

pub fn random_transform<R: Rng + ?Sized>(rng: &mut R, max_translation: f64) -> RigidTransform {
    let t = Vector3::new(
        rng.gen_range(-max_translation..=max_translation),
        rng.gen_range(-max_translation..=max_translation),
        rng.gen_range(-max_translation..=max_translation),
    );
    RigidTransform::new(random_rotation(rng), t).expect("random rotation is proper")
}

/// Gaussian 3-vector with per-component standard deviation `sigma`.
pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Marker-body poses pivoting about `pivot` with the tool tip at `tip_offset`
/// (body frame). Tilts are random up to `max_tilt_deg` about random horizontal
/// axes plus a random spin about the tool axis; isotropic Gaussian noise of
/// `noise_mm` is added to each pose's position.
pub fn pivot_poses<R: Rng + ?Sized>(
    rng: &mut R,
    tip_offset: Vector3<f64>,
    pivot: Vector3<f64>,
    n: usize,
    max_tilt_deg: f64,
    noise_mm: f64,
) -> Vec<RigidTransform> {
    (0..n)
        .map(|_| {
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            let tilt = rng.gen_range(0.3..=1.0) * max_tilt_deg.to_radians();
            let spin = rng.gen_range(-1.0..=1.0);
            let r = rotation_exp(&(Vector3::new(heading.cos(), heading.sin(), 0.0) * tilt))
                * rotation_exp(&(Vector3::z() * spin));
            let p = pivot - r * tip_offset + gaussian_vector(rng, noise_mm);
            RigidTransform::new(r, p).expect("proper rotation")
        })
        .collect()
}

/// Radius of the bumpy cranial cap used by [`skull_surface`] along a direction.
fn skull_radius(dir: &Vector3<f64>) -> f64 {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let axes = Vector3::new(48.0, 38.0, 30.0);
    let ellipsoid = 1.0 / ((x / axes.x).powi(2) + (y / axes.y).powi(2) + (z / axes.z).powi(2)).sqrt();
    ellipsoid * (1.0 + 0.06 * (3.0 * x).sin() * (2.0 * y + 0.5).cos() + 0.04 * (4.0 * z).cos())
}

/// `n` points on an asymmetric, bumpy upper cap (z ≥ −8 mm) resembling a
/// skull surface, in mm. Deterministic.
pub fn skull_surface(n: usize) -> PointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts = Vec::with_capacity(n);
    let mut i = 0usize;
    // Fibonacci directions over the upper ~60% of the sphere.
    let total = (n as f64 / 0.6).ceil() as usize + 1;
    while pts.len() < n && i < 4 * total {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / total as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = i as f64 * golden;
        let dir = Vector3::new(r * phi.cos(), r * phi.sin(), z);
        let p = dir * skull_radius(&dir);
        if p.z >= -8.0 {
            pts.push(p + Vector3::new(2.0, -1.0, 0.0));
        }
        i += 1;
    }
    PointCloud::new(pts)
}

/// Solid voxel model of the [`skull_surface`] shape, translated by `offset`.
pub fn skull_volume(spacing: f64, offset: Vector3<f64>) -> VoxelVolume {
    let dims = [(110.0 / spacing) as usize, (90.0 / spacing) as usize, (56.0 / spacing) as usize];
    let origin = offset + Vector3::new(-53.0, -46.0, -10.0);
    let mut vol = VoxelVolume::new(dims, Vector3::repeat(spacing), origin).expect("valid grid");
    vol.fill_with(|p| {
        let q = p - offset - Vector3::new(2.0, -1.0, 0.0);
        q.z >= -8.0 && q.norm() <= skull_radius(&q.normalize())
    });
    vol
}

/// Recorded streams for a hand-eye calibration session.
#[derive(Debug, Clone)]
pub struct HandEyeRecording {
    /// Camera marker-body poses in the tracker frame.
    pub tracker: Vec<(f64, RigidTransform)>,
    /// Pattern poses in the camera frame (pattern → camera).
    pub pattern: Vec<(f64, RigidTransform)>,
    /// Pattern pose in the tracker frame.
    pub pattern_in_tracker: RigidTransform,
    /// Noise-free pattern-in-camera poses.
    pub pattern_truth: Vec<RigidTransform>,
}

/// Looks from `eye` towards `target`; camera z forward, with `roll` about it.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, roll: f64) -> RigidTransform {
    let z = (target - eye).normalize();
    let helper = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let x = helper.cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_columns(&[x, y, z]) * rotation_exp(&(Vector3::z() * roll));
    RigidTransform::new(r, eye).expect("orthonormal frame")
}

/// Camera views of a fixed pattern from ~190 mm within a 40° cone, with the
/// camera marker body related by `x`. Pattern-side poses get Gaussian rotation
/// (`sigma_rot` rad per axis) and translation (`sigma_trans` mm) noise.
pub fn hand_eye_sequence<R: Rng + ?Sized>(
    rng: &mut R,
    x: &RigidTransform,
    n: usize,
    sigma_rot: f64,
    sigma_trans: f64,
) -> HandEyeRecording {
    let pattern_in_tracker =
        RigidTransform::from_axis_angle(Vector3::new(0.1, 0.2, 1.0), 0.4, Vector3::new(50.0, -80.0, 1100.0));
    let center = pattern_in_tracker.transform_point(&Vector3::new(40.0, 30.0, 0.0));
    let normal = pattern_in_tracker.transform_vector(&Vector3::z());
    let mut out =
        HandEyeRecording { tracker: Vec::new(), pattern: Vec::new(), pattern_in_tracker, pattern_truth: Vec::new() };
    let x_inv = x.inverse();
    for i in 0..n {
        let tilt = rng.gen_range(0.0..40f64.to_radians());
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let perp = normal.cross(&Vector3::x()).normalize();
        let axis = rotation_exp(&(normal * heading)) * perp;
        let dir = rotation_exp(&(axis * tilt)) * normal;
        let eye = center - dir * rng.gen_range(170.0..210.0);
        let cam = look_at(eye, center, rng.gen_range(-1.2..1.2));
        let t = i as f64 * 0.1;
        out.tracker.push((t, cam.compose(&x_inv)));
        let truth = cam.inverse().compose(&pattern_in_tracker);
        let noise =
            RigidTransform::new(rotation_exp(&gaussian_vector(rng, sigma_rot)), gaussian_vector(rng, sigma_trans))
                .expect("proper rotation");
        out.pattern.push((t + rng.gen_range(-0.002..0.002), noise.compose(&truth)));
        out.pattern_truth.push(truth);
    }
    out
}

/// Planar grid of calibration-pattern corners in the pattern frame (mm).
pub fn charuco_corners(cols: usize, rows: usize, square_mm: f64) -> Vec<Vector3<f64>> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| Vector3::new(c as f64 * square_mm, r as f64 * square_mm, 0.0)))
        .collect()
}

/// Inputs for a synthetic drilling session.
#[derive(Debug, Clone)]
pub struct DrillingScenario {
    pub bundle: CalibrationBundle,
    pub volume: VoxelVolume,
    pub samples: Vec<PoseSample>,
    /// Planned tip positions in volume coordinates, one per frame.
    pub tip_path: Vec<Vector3<f64>>,
}

/// Mastoidectomy-style tip path over a solid block: a spiral raster that
/// enters 2 mm above the top face and deepens as it widens.
pub fn mastoidectomy_path(frames: usize, dims: [usize; 3], spacing: f64) -> Vec<Vector3<f64>> {
    let extent = Vector3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * spacing;
    let center = Vector3::new(extent.x / 2.0, extent.y / 2.0, extent.z - spacing / 2.0);
    let max_radius = (0.25 * extent.x.min(extent.y)).min(15.0);
    let depth = (0.4 * extent.z).min(12.0);
    let turns = 8.0;
    (0..frames)
        .map(|k| {
            let s = if frames > 1 { k as f64 / (frames - 1) as f64 } else { 0.0 };
            let angle = std::f64::consts::TAU * turns * s;
            let radius = max_radius * (0.15 + 0.85 * (turns * s).fract());
            center + Vector3::new(radius * angle.cos(), radius * angle.sin(), 2.0 - (depth + 2.0) * s)
        })
        .collect()
}

/// Tracker streams for [`mastoidectomy_path`] at 30 Hz: drill, phantom and
/// camera marker bodies, with a tilted tool and rotated phantom mount.
pub fn drilling_scenario(frames: usize, dims: [usize; 3], spacing: f64) -> DrillingScenario {
    let volume = VoxelVolume::solid(dims, Vector3::repeat(spacing), Vector3::zeros()).expect("valid grid");
    let bundle = CalibrationBundle {
        f_db_d: Some(RigidTransform::from_axis_angle(
            Vector3::new(0.1, 1.0, 0.0),
            0.15,
            Vector3::new(4.0, -3.0, 210.0),
        )),
        f_pb_p: Some(RigidTransform::from_axis_angle(
            Vector3::new(0.0, 0.3, 1.0),
            0.7,
            Vector3::new(-60.0, 120.0, -90.0),
        )),
        f_cb_c: Some(RigidTransform::from_axis_angle(Vector3::x(), 0.2, Vector3::new(0.0, 25.0, 30.0))),
    };
    let pb = RigidTransform::from_axis_angle(Vector3::new(0.2, -1.0, 0.3), 0.4, Vector3::new(120.0, -40.0, 1100.0));
    let phantom = pb.compose(&bundle.f_pb_p.expect("set"));
    // Camera ~190 mm above the top face, looking down at the drilling site.
    let site = Vector3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * (0.5 * spacing);
    let eye = site + Vector3::new(40.0, -30.0, 180.0);
    let cam = phantom.compose(&look_at(eye, site, 0.3));
    let cb = cam.compose(&bundle.f_cb_c.expect("set").inverse());
    let db_d_inv = bundle.f_db_d.expect("set").inverse();
    let tip_path = mastoidectomy_path(frames, dims, spacing);
    let mut samples = Vec::with_capacity(3 * frames);
    for (k, tip) in tip_path.iter().enumerate() {
        let t = k as f64 / 30.0;
        // Tool roughly along −z of the volume, wobbling with the raster.
        let tilt = Vector3::new(0.3 * (0.7 * t).sin(), 0.2 * (0.5 * t).cos(), 0.0);
        let tool =
            RigidTransform::new(rotation_exp(&(Vector3::x() * std::f64::consts::PI)) * rotation_exp(&tilt), *tip)
                .expect("proper rotation");
        let db = phantom.compose(&tool).compose(&db_d_inv);
        samples.push(PoseSample { timestamp: t, frame_id: FrameId::DrillBase, pose: db });
        samples.push(PoseSample { timestamp: t, frame_id: FrameId::PhantomBase, pose: pb });
        samples.push(PoseSample { timestamp: t, frame_id: FrameId::CameraBase, pose: cb });
    }
    DrillingScenario { bundle, volume, samples, tip_path }
}
