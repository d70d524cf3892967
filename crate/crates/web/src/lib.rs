//! WebAssembly bindings for the static demo page in `www/`: an error-budget
//! explorer, an interactive drill-and-render view, and the pixel-to-metric
//! RPE converter.

use drilltwin::camera::{self, DrillGeometry, Intrinsics, Label, PinholeCamera};
use drilltwin::engine::{CalibrationBundle, EngineOptions, Frame, FrameId, PoseSample, TwinState};
use drilltwin::error_budget::{budget_report, ChainErrorSpec, MonteCarloOptions};
use drilltwin::{RigidTransform, VoxelVolume};
use nalgebra::{Matrix3, Vector3};
use wasm_bindgen::prelude::*;

fn four(v: &[f64], what: &str) -> Result<[f64; 4], String> {
    v.try_into().map_err(|_| format!("{what} needs 4 values, got {}", v.len()))
}

/// Budget report JSON for the bench chain with the given per-link caps
/// (pb_p, o_pb, o_db, db_d). `draws = 0` skips the Monte-Carlo check.
#[wasm_bindgen]
pub fn error_budget(alpha_deg: &[f64], eps_mm: &[f64], draws: u32, seed: u32) -> Result<String, String> {
    let spec =
        ChainErrorSpec::new(four(alpha_deg, "alpha_deg")?, four(eps_mm, "eps_mm")?, ChainErrorSpec::bench().chain)
            .map_err(|e| e.to_string())?;
    let mc = (draws > 0).then(|| MonteCarloOptions::new(draws as usize, seed as u64));
    Ok(budget_report(&spec, mc.as_ref()).to_json())
}

/// Metric error (mm) of a reprojection error at the given camera distance.
#[wasm_bindgen]
pub fn rpe_to_metric(rpe_px: f64, camera_to_target_mm: f64, focal_px: f64) -> Result<f64, String> {
    camera::rpe_to_metric(rpe_px, camera_to_target_mm, focal_px).map_err(|e| e.to_string())
}

const FPS: f64 = 30.0;

/// Camera at `eye` looking at `target` with world +z up in the image.
fn upright_view(eye: Vector3<f64>, target: Vector3<f64>) -> RigidTransform {
    let z = (target - eye).normalize();
    let y = -(Vector3::z() - z * z.z).normalize();
    RigidTransform::new(Matrix3::from_columns(&[y.cross(&z), y, z]), eye).expect("orthonormal frame")
}

/// A bone block drilled by a burr that follows the pointer.
#[wasm_bindgen]
pub struct DrillDemo {
    state: TwinState,
    extent: Vector3<f64>,
    drill: DrillGeometry,
    frames: u64,
    tip: Vector3<f64>,
}

#[wasm_bindgen]
impl DrillDemo {
    /// Cubic block of `dim³` voxels at `spacing_mm`.
    #[wasm_bindgen(constructor)]
    pub fn new(dim: u32, spacing_mm: f64, burr_radius_mm: f64) -> Result<DrillDemo, String> {
        if !(2..=256).contains(&dim) || !(spacing_mm > 0.0) || !(burr_radius_mm > 0.0) {
            return Err("need 2 ≤ dim ≤ 256 and positive spacing and burr radius".into());
        }
        let n = dim as usize;
        let volume =
            VoxelVolume::solid([n; 3], Vector3::repeat(spacing_mm), Vector3::zeros()).map_err(|e| e.to_string())?;
        let bundle = CalibrationBundle {
            f_db_d: Some(RigidTransform::identity()),
            f_pb_p: Some(RigidTransform::identity()),
            f_cb_c: None,
        };
        let options = EngineOptions { burr_radius_mm, ..EngineOptions::default() };
        let extent = Vector3::repeat(spacing_mm * (n - 1) as f64);
        let drill = DrillGeometry {
            tip_radius: burr_radius_mm,
            shaft_radius: 0.6 * burr_radius_mm,
            shaft_length: extent.z * 1.5,
        };
        let tip = Vector3::new(extent.x / 2.0, extent.y / 2.0, extent.z + 3.0 * burr_radius_mm);
        Ok(DrillDemo { state: TwinState::new(bundle, volume, options), extent, drill, frames: 0, tip })
    }

    /// Moves the burr over `(u, v)` ∈ [0, 1]² of the top face with its lowest
    /// point `depth_mm` below that face (negative hovers), carving the path;
    /// returns voxels removed.
    pub fn move_tip(&mut self, u: f64, v: f64, depth_mm: f64) -> u32 {
        self.tip = Vector3::new(
            u.clamp(0.0, 1.0) * self.extent.x,
            v.clamp(0.0, 1.0) * self.extent.y,
            self.extent.z - depth_mm + self.drill.tip_radius,
        );
        let t = self.frames as f64 / FPS;
        self.frames += 1;
        let frame = Frame {
            timestamp: t,
            samples: vec![
                PoseSample {
                    timestamp: t,
                    frame_id: FrameId::DrillBase,
                    pose: RigidTransform::from_translation(self.tip),
                },
                PoseSample { timestamp: t, frame_id: FrameId::PhantomBase, pose: RigidTransform::identity() },
            ],
        };
        self.state.step(&frame).map(|r| r.removed as u32).unwrap_or(0)
    }

    pub fn occupied(&self) -> f64 {
        self.state.volume().occupied_count() as f64
    }

    pub fn removed(&self) -> f64 {
        (self.state.initial_occupied() - self.state.volume().occupied_count()) as f64
    }

    /// RGBA view from above the block's corner, bone lit from the upper left.
    pub fn render(&self, width: u32, height: u32) -> Result<Vec<u8>, String> {
        let f = 0.9 * width.max(height) as f64;
        let k =
            Intrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height).map_err(|e| e.to_string())?;
        let center = self.extent * 0.5;
        let size = self.extent.norm();
        let eye = center + Vector3::new(0.8, -1.0, 1.3) * size;
        let cam = PinholeCamera::new(k, upright_view(eye, center)).map_err(|e| e.to_string())?;
        let drill_pose = RigidTransform::from_translation(self.tip);
        let r =
            camera::render(&cam, self.state.volume(), &RigidTransform::identity(), Some((&drill_pose, &self.drill)));
        let (w, h) = (width as usize, height as usize);
        let depth: Vec<f64> = r
            .labels
            .codes()
            .iter()
            .zip(&r.phantom_hits)
            .map(|(c, hit)| match (Label::from_code(*c), hit) {
                (Ok(Label::Phantom), Some(hit)) => hit.depth,
                _ => f64::NAN,
            })
            .collect();
        // Central difference, falling back to one-sided at silhouettes.
        let slope = |i: usize, lo: Option<usize>, hi: Option<usize>| -> f64 {
            let at = |k: Option<usize>| k.map(|k| depth[k]).filter(|d| d.is_finite());
            match (at(lo), at(hi)) {
                (Some(a), Some(b)) => (b - a) / 2.0,
                (Some(a), None) => depth[i] - a,
                (None, Some(b)) => b - depth[i],
                (None, None) => 0.0,
            }
        };
        let light = Vector3::new(-0.5, -0.8, -1.0).normalize();
        let mut rgba = Vec::with_capacity(4 * w * h);
        for (i, code) in r.labels.codes().iter().enumerate() {
            let (x, y) = (i % w, i / w);
            let px = match Label::from_code(*code) {
                Ok(Label::Phantom) if depth[i].is_finite() => {
                    let m = f / depth[i];
                    let gx = slope(i, (x > 0).then(|| i - 1), (x + 1 < w).then_some(i + 1)) * m;
                    let gy = slope(i, (y > 0).then(|| i - w), (y + 1 < h).then_some(i + w)) * m;
                    let s = 0.3 + 0.7 * Vector3::new(gx, gy, -1.0).normalize().dot(&light).max(0.0);
                    [(236.0 * s) as u8, (224.0 * s) as u8, (196.0 * s) as u8]
                }
                Ok(Label::Drill) => [150, 160, 175],
                _ => [24, 28, 40],
            };
            rgba.extend_from_slice(&[px[0], px[1], px[2], 255]);
        }
        Ok(rgba)
    }
}
