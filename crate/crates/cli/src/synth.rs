//! Deterministic synthetic inputs, with ground truth written alongside.

use std::path::PathBuf;

use clap::Subcommand;
use drilltwin::engine::{save_pose_log, FrameId, PoseSample};
use drilltwin::geometry::{rotation_exp, TransformRecord};
use drilltwin::{synth, RigidTransform};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::files::{write_points, write_text, write_timed_poses, write_trajectory, CmdResult, Failure};

#[derive(Subcommand)]
pub enum SynthCommand {
    /// Drill marker-body poses pivoting about a fixed point.
    Pivot {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        poses: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_mm: f64,
        #[arg(long, default_value_t = 35.0)]
        max_tilt_deg: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Paired straight-line trajectories related by a random rotation.
    Axis {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Skull-like model surface and digitized points under a random
    /// registration.
    Icp {
        /// Model points in volume coordinates.
        #[arg(long)]
        model: PathBuf,
        /// Every fourth model point, in the phantom marker-body frame.
        #[arg(long)]
        sampled: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also write a voxel model of the same shape.
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long, default_value_t = 1600)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Camera marker-body and pattern pose streams for hand-eye calibration.
    Handeye {
        #[arg(long)]
        tracker: PathBuf,
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        /// Rotate only about one fixed axis (unobservable).
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// A drilling session: pose log, calibration bundle and solid volume.
    Drilling {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value_t = 1000)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        spacing_mm: f64,
    },
}

fn write_truth(path: &Option<PathBuf>, value: serde_json::Value) -> CmdResult {
    match path {
        Some(p) => write_text(p, &serde_json::to_string_pretty(&value).expect("json")),
        None => Ok(()),
    }
}

fn save_log(path: &std::path::Path, samples: &[PoseSample]) -> CmdResult {
    save_pose_log(path, samples).map_err(Failure::from)
}

pub fn run(cmd: SynthCommand) -> CmdResult {
    match cmd {
        SynthCommand::Pivot { out, truth, poses, noise_mm, max_tilt_deg, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tip = Vector3::new(3.0, -2.0, 185.0);
            let pivot = Vector3::new(120.0, -60.0, 1050.0);
            let samples: Vec<PoseSample> = synth::pivot_poses(&mut rng, tip, pivot, poses, max_tilt_deg, noise_mm)
                .into_iter()
                .enumerate()
                .map(|(i, pose)| PoseSample { timestamp: i as f64 / 30.0, frame_id: FrameId::DrillBase, pose })
                .collect();
            save_log(&out, &samples)?;
            write_truth(
                &truth,
                json!({"tip_offset_mm": [tip.x, tip.y, tip.z], "pivot_point_mm": [pivot.x, pivot.y, pivot.z]}),
            )
        }
        SynthCommand::Axis { out, truth, samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rot = rotation_exp(&(synth::random_unit(&mut rng) * rng.gen_range(0.1..1.0)));
            let offset =
                Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(100.0..200.0));
            let n = samples.max(2);
            let p: Vec<Vector3<f64>> =
                (0..n).map(|i| Vector3::new(0.0, 0.0, 40.0 * i as f64 / (n - 1) as f64)).collect();
            let q: Vec<Vector3<f64>> = p.iter().map(|x| rot * x + offset).collect();
            write_trajectory(&out, &p, &q)?;
            let d = rot * Vector3::z();
            write_truth(&truth, json!({"q_direction": [d.x, d.y, d.z]}))
        }
        SynthCommand::Icp { model, sampled, truth, volume, points, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f_pb_p = RigidTransform::new(
                rotation_exp(&(synth::random_unit(&mut rng) * rng.gen_range(0.05..0.25))),
                Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            )
            .expect("proper rotation");
            let surface = synth::skull_surface(points);
            let to_pb = f_pb_p;
            let digitized: Vec<Vector3<f64>> =
                surface.points().iter().step_by(4).map(|p| to_pb.transform_point(p)).collect();
            write_points(&model, surface.points())?;
            write_points(&sampled, &digitized)?;
            if let Some(v) = volume {
                synth::skull_volume(1.0, Vector3::zeros()).save(v)?;
            }
            write_truth(&truth, json!({"f_pb_p": TransformRecord::from(f_pb_p)}))
        }
        SynthCommand::Handeye { tracker, pattern, truth, frames, parallel, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = RigidTransform::from_axis_angle(Vector3::new(0.3, -0.2, 1.0), 0.6, Vector3::new(15.0, -25.0, 40.0));
            let (cb, pat) = if parallel {
                let pattern_in_tracker = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1100.0));
                let base = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 900.0));
                let cb: Vec<(f64, RigidTransform)> = (0..frames)
                    .map(|i| {
                        let spin =
                            RigidTransform::from_axis_angle(Vector3::z(), rng.gen_range(-0.8..0.8), Vector3::zeros());
                        (i as f64 * 0.1, base.compose(&spin))
                    })
                    .collect();
                let pat = cb.iter().map(|(t, c)| (*t, c.compose(&x).inverse().compose(&pattern_in_tracker))).collect();
                (cb, pat)
            } else {
                let rec = synth::hand_eye_sequence(&mut rng, &x, frames, 0.0, 0.0);
                (rec.tracker, rec.pattern)
            };
            let samples: Vec<PoseSample> = cb
                .iter()
                .map(|(t, pose)| PoseSample { timestamp: *t, frame_id: FrameId::CameraBase, pose: *pose })
                .collect();
            save_log(&tracker, &samples)?;
            write_timed_poses(&pattern, &pat)?;
            write_truth(&truth, json!({"f_cb_c": TransformRecord::from(x)}))
        }
        SynthCommand::Drilling { log, bundle, volume, frames, dim, spacing_mm } => {
            let sc = synth::drilling_scenario(frames, [dim; 3], spacing_mm);
            save_log(&log, &sc.samples)?;
            sc.bundle.save(&bundle)?;
            sc.volume.save(&volume)?;
            Ok(())
        }
    }
}
