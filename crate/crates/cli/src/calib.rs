//! Calibration commands; each updates one entry of the bundle file.

use std::path::{Path, PathBuf};

use clap::Args;
use drilltwin::calibration::{
    build_motion_pairs, filter_motion_pairs, hand_eye_calibrate, kabsch_axis_calibrate, pivot_calibrate, register,
    FilterOptions, IcpOptions, TrajectoryPair,
};
use drilltwin::engine::{load_pose_log, CalibrationBundle, FrameId};
use drilltwin::geometry::TransformRecord;
use drilltwin::{PointCloud, RigidTransform, VoxelVolume};
use nalgebra::{Matrix3, Vector3};
use serde_json::json;

use crate::files::{emit, read_json, read_points, read_timed_poses, read_trajectory, CmdResult, Failure};

fn update_bundle(path: &Path, edit: impl FnOnce(&mut CalibrationBundle)) -> Result<CalibrationBundle, Failure> {
    let mut bundle = CalibrationBundle::load_or_default(path)?;
    edit(&mut bundle);
    bundle.save(path)?;
    Ok(bundle)
}

fn frame_poses(path: &Path, frame: FrameId) -> Result<Vec<(f64, RigidTransform)>, Failure> {
    Ok(load_pose_log(path)?.into_iter().filter(|s| s.frame_id == frame).map(|s| (s.timestamp, s.pose)).collect())
}

fn print(value: serde_json::Value) {
    emit(serde_json::to_string_pretty(&value).expect("json"));
}

fn vec3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub fn pivot(poses: &Path, frame: FrameId, bundle: &Path) -> CmdResult {
    let poses: Vec<RigidTransform> = frame_poses(poses, frame)?.into_iter().map(|(_, p)| p).collect();
    let r = pivot_calibrate(&poses)?;
    update_bundle(bundle, |b| {
        let rotation = b.f_db_d.map_or_else(Matrix3::identity, |t| *t.rotation());
        b.f_db_d = Some(RigidTransform::new(rotation, r.tip_offset).expect("bundle rotation is proper"));
    })?;
    print(json!({
        "poses": poses.len(),
        "tip_offset_mm": vec3(&r.tip_offset),
        "pivot_point_mm": vec3(&r.pivot_point),
        "residual_rms_mm": r.residual_rms,
        "condition": r.condition,
    }));
    Ok(())
}

pub fn axis(trajectory: &Path, bundle: &Path) -> CmdResult {
    let (p, q) = read_trajectory(trajectory)?;
    let cal = kabsch_axis_calibrate(&TrajectoryPair::new(p, q)?)?;
    update_bundle(bundle, |b| {
        let t = b.f_db_d.map_or_else(Vector3::zeros, |t| *t.translation());
        b.f_db_d = Some(RigidTransform::new(cal.rotation, t).expect("Kabsch rotation is proper"));
    })?;
    let angle = RigidTransform::new(cal.rotation, Vector3::zeros()).expect("proper").angle();
    print(json!({
        "p_direction": vec3(&cal.p_direction),
        "q_direction": vec3(&cal.q_direction),
        "rotation_angle_deg": angle.to_degrees(),
        "q_wxyz": RigidTransform::new(cal.rotation, Vector3::zeros()).expect("proper").quaternion_wxyz(),
    }));
    Ok(())
}

#[derive(Args)]
pub struct IcpArgs {
    /// Surface points digitized on the phantom, in the phantom marker-body
    /// frame (`x_mm,y_mm,z_mm`).
    #[arg(long)]
    pub sampled: PathBuf,
    /// Model surface: a volume (`.vvj`/`.vvb`) or a point CSV in volume
    /// coordinates.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Initial phantom-in-marker-body guess (`{"q_wxyz":..,"t_mm":..}`);
    /// principal-axes hypotheses otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 5.0)]
    pub max_distance_mm: f64,
    #[arg(long, default_value_t = 10)]
    pub normal_neighbours: usize,
}

fn load_model(path: &Path) -> Result<PointCloud, Failure> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("vvj") | Some("vvb") => Ok(VoxelVolume::load(path)?.surface_pointcloud()),
        _ => Ok(PointCloud::new(read_points(path)?)),
    }
}

pub fn icp(args: &IcpArgs) -> CmdResult {
    let sampled = PointCloud::new(read_points(&args.sampled)?);
    let model = load_model(&args.model)?;
    for (cloud, path) in [(&sampled, &args.sampled), (&model, &args.model)] {
        if cloud.is_empty() {
            return Err(Failure::file("EmptyCloud", format!("{} contains no points", path.display())));
        }
    }
    let init = match &args.init {
        Some(p) => Some(
            RigidTransform::try_from(read_json::<TransformRecord>(p)?)
                .map_err(|e| Failure::file("FormatError", format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let opts = IcpOptions {
        max_iter: args.max_iter,
        tol: args.tol,
        max_correspondence_distance: args.max_distance_mm,
        normal_neighbours: args.normal_neighbours,
    };
    // Sampled points are registered onto the dense model, whose normals are
    // reliable; the result maps the marker-body frame into volume coordinates.
    let seed = init.map(|t| t.inverse());
    let r = register(&sampled, &model, seed.as_ref(), &opts)?;
    let f_pb_p = r.transform.inverse();
    update_bundle(&args.bundle, |b| b.f_pb_p = Some(f_pb_p))?;
    print(json!({
        "sampled_points": sampled.len(),
        "model_points": model.len(),
        "residual_rms_mm": r.residual_rms,
        "iterations": r.iterations,
        "converged": r.converged,
        "inliers": r.inliers,
        "f_pb_p": TransformRecord::from(f_pb_p),
    }));
    Ok(())
}

pub fn handeye(tracker: &Path, pattern: &Path, bundle: &Path, window_s: f64) -> CmdResult {
    let tracker = frame_poses(tracker, FrameId::CameraBase)?;
    let pattern = read_timed_poses(pattern)?;
    let pairs = build_motion_pairs(&tracker, &pattern, window_s)?;
    let filtered = filter_motion_pairs(&pairs, &FilterOptions::default())?;
    let r = hand_eye_calibrate(&filtered.kept)?;
    update_bundle(bundle, |b| b.f_cb_c = Some(r.x))?;
    print(json!({
        "pairs": pairs.len(),
        "kept": filtered.kept.len(),
        "rejected": filtered.rejected_count,
        "rotation_residual_deg": r.rotation_residual_deg,
        "translation_residual_mm": r.translation_residual_mm,
        "f_cb_c": TransformRecord::from(r.x),
    }));
    Ok(())
}
