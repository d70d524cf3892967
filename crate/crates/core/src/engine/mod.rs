//! The live twin loop: resolve the pose chains per frame, carve the burr's
//! swept volume and publish immutable snapshots for rendering.

mod pipeline;
mod records;

pub use pipeline::{BoundedQueue, Frame, RecordPipeline, DEFAULT_REORDER_WINDOW_S};
pub use records::{
    load_pose_log, parse_stream_line, read_pose_log, save_pose_log, to_stream_line, write_pose_log, FrameId,
    PoseSample, StreamRecord, POSE_LOG_HEADER,
};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::volume::{VolumeError, VoxelVolume};

pub const DEFAULT_STALENESS_S: f64 = 0.1;
pub const DEFAULT_BURR_RADIUS_MM: f64 = 2.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("MissingCalibration: {0}")]
    MissingCalibration(String),
    #[error("FormatError: {0}")]
    Format(String),
    #[error("IoError: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl EngineError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MissingCalibration(_) => "MissingCalibration",
            Self::Format(_) => "FormatError",
            Self::Io { .. } => "IoError",
            Self::Volume(v) => v.name(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_owned(), source }
    }
}

/// Fixed marker-body-to-object calibrations. Missing entries stay `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationBundle {
    /// Drill tip in the drill marker-body frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_db_d: Option<RigidTransform>,
    /// Phantom (volume) in the phantom marker-body frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_pb_p: Option<RigidTransform>,
    /// Camera in the camera marker-body frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_cb_c: Option<RigidTransform>,
}

impl CalibrationBundle {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        serde_json::from_str(text).map_err(|e| EngineError::Format(format!("calibration bundle: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads `path` when it exists, otherwise returns an empty bundle.
    pub fn load_or_default(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| EngineError::io(path, e))
    }

    fn carving_links(&self) -> Result<(RigidTransform, RigidTransform), EngineError> {
        match (self.f_db_d, self.f_pb_p) {
            (Some(d), Some(p)) => Ok((d, p)),
            (None, _) => Err(EngineError::MissingCalibration("f_db_d (drill tip) is not calibrated".into())),
            (_, None) => Err(EngineError::MissingCalibration("f_pb_p (phantom registration) is not calibrated".into())),
        }
    }
}

/// How the burr's motion between consecutive frames is carved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstepPolicy {
    /// Exact swept volume: the capsule between consecutive tip positions.
    Capsule,
    /// Spheres interpolated along the motion at `min(r, voxel)/2` spacing.
    Spheres,
    /// One sphere per frame, no interpolation.
    Frame,
}

impl FromStr for SubstepPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "capsule" => Ok(Self::Capsule),
            "spheres" => Ok(Self::Spheres),
            "frame" => Ok(Self::Frame),
            other => Err(format!("unknown sub-step policy {other:?} (capsule, spheres, frame)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub burr_radius_mm: f64,
    /// Poses older than this relative to the frame are stale (s).
    pub staleness_s: f64,
    pub substep_policy: SubstepPolicy,
    pub reorder_window_s: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            burr_radius_mm: DEFAULT_BURR_RADIUS_MM,
            staleness_s: DEFAULT_STALENESS_S,
            substep_policy: SubstepPolicy::Capsule,
            reorder_window_s: DEFAULT_REORDER_WINDOW_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarveEvent {
    pub timestamp: f64,
    /// Tip centre in volume coordinates (mm).
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    pub removed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub frame_index: u64,
    pub timestamp: f64,
    /// Required poses that were missing or older than the staleness window;
    /// non-empty means the frame was skipped.
    pub stale: Vec<FrameId>,
    pub tip_mm: Option<[f64; 3]>,
    pub removed: u64,
    pub latency_ms: f64,
}

impl FrameReport {
    pub fn stale_pose(&self) -> bool {
        !self.stale.is_empty()
    }
}

/// Tracker-frame poses of the drill tip, phantom and camera, where known.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ResolvedPoses {
    pub drill: Option<RigidTransform>,
    pub phantom: Option<RigidTransform>,
    pub camera: Option<RigidTransform>,
}

/// Immutable view of the twin at one frame; cheap to clone and share.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub frame_counter: u64,
    pub volume: Arc<VoxelVolume>,
    pub samples: [Option<PoseSample>; 3],
    pub poses: ResolvedPoses,
}

#[cfg(not(target_arch = "wasm32"))]
type Clock = std::time::Instant;

#[cfg(not(target_arch = "wasm32"))]
fn elapsed_ms(start: &Clock) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

#[cfg(target_arch = "wasm32")]
type Clock = ();

#[cfg(target_arch = "wasm32")]
fn elapsed_ms(_: &Clock) -> f64 {
    0.0
}

fn now() -> Clock {
    #[cfg(not(target_arch = "wasm32"))]
    return std::time::Instant::now();
    #[cfg(target_arch = "wasm32")]
    ()
}

#[derive(Debug, Clone)]
pub struct TwinState {
    calibration: CalibrationBundle,
    options: EngineOptions,
    latest: [Option<PoseSample>; 3],
    volume: Arc<VoxelVolume>,
    initial_occupied: u64,
    frame_counter: u64,
    carve_log: Vec<CarveEvent>,
    last_tip: Option<Vector3<f64>>,
}

impl TwinState {
    pub fn new(calibration: CalibrationBundle, volume: VoxelVolume, options: EngineOptions) -> Self {
        let initial_occupied = volume.occupied_count();
        Self {
            calibration,
            options,
            latest: [None; 3],
            volume: Arc::new(volume),
            initial_occupied,
            frame_counter: 0,
            carve_log: Vec::new(),
            last_tip: None,
        }
    }

    pub fn volume(&self) -> &VoxelVolume {
        &self.volume
    }

    pub fn calibration(&self) -> &CalibrationBundle {
        &self.calibration
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    pub fn carve_log(&self) -> &[CarveEvent] {
        &self.carve_log
    }

    pub fn frame_counter(&self) -> u64 {
        self.frame_counter
    }

    pub fn initial_occupied(&self) -> u64 {
        self.initial_occupied
    }

    pub fn latest(&self, id: FrameId) -> Option<&PoseSample> {
        self.latest[id.index()].as_ref()
    }

    pub fn resolved_poses(&self) -> ResolvedPoses {
        let link = |id: FrameId, cal: Option<RigidTransform>| Some(self.latest(id)?.pose.compose(&cal?));
        ResolvedPoses {
            drill: link(FrameId::DrillBase, self.calibration.f_db_d),
            phantom: link(FrameId::PhantomBase, self.calibration.f_pb_p),
            camera: link(FrameId::CameraBase, self.calibration.f_cb_c),
        }
    }

    /// Shares the current volume; later carving copies it on write, so the
    /// snapshot never changes.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            frame_counter: self.frame_counter,
            volume: Arc::clone(&self.volume),
            samples: self.latest,
            poses: self.resolved_poses(),
        }
    }

    /// Ingests one frame and carves the burr's motion since the last carved
    /// frame. A frame whose drill or phantom pose is missing or stale is
    /// skipped, and the next carve starts a fresh sweep.
    pub fn step(&mut self, frame: &Frame) -> Result<FrameReport, EngineError> {
        let start = now();
        let (f_db_d, f_pb_p) = self.calibration.carving_links()?;
        for s in &frame.samples {
            self.latest[s.frame_id.index()] = Some(*s);
        }
        self.frame_counter += 1;
        let window = self.options.staleness_s;
        let fresh = |id: FrameId| self.latest[id.index()].filter(|s| frame.timestamp - s.timestamp <= window);
        let (drill_base, phantom_base) = (fresh(FrameId::DrillBase), fresh(FrameId::PhantomBase));
        let mut report = FrameReport {
            frame_index: self.frame_counter - 1,
            timestamp: frame.timestamp,
            stale: Vec::new(),
            tip_mm: None,
            removed: 0,
            latency_ms: 0.0,
        };
        let (Some(db), Some(pb)) = (drill_base, phantom_base) else {
            if drill_base.is_none() {
                report.stale.push(FrameId::DrillBase);
            }
            if phantom_base.is_none() {
                report.stale.push(FrameId::PhantomBase);
            }
            self.last_tip = None;
            report.latency_ms = elapsed_ms(&start);
            return Ok(report);
        };

        let drill = db.pose.compose(&f_db_d);
        let phantom = pb.pose.compose(&f_pb_p);
        let tip = *phantom.inverse().compose(&drill).translation();
        let r = self.options.burr_radius_mm;
        let removed = {
            let vol = Arc::make_mut(&mut self.volume);
            match (self.options.substep_policy, self.last_tip) {
                (SubstepPolicy::Capsule, Some(prev)) => vol.carve_capsule(&prev, &tip, r),
                (SubstepPolicy::Spheres, Some(prev)) => {
                    let step = 0.5 * r.min(vol.spacing().min());
                    let n = ((tip - prev).norm() / step).ceil().max(1.0) as usize;
                    (1..=n).map(|k| vol.carve_sphere(&prev.lerp(&tip, k as f64 / n as f64), r)).sum()
                }
                _ => vol.carve_sphere(&tip, r),
            }
        } as u64;
        self.last_tip = Some(tip);
        self.carve_log.push(CarveEvent { timestamp: frame.timestamp, center_mm: tip.into(), radius_mm: r, removed });
        report.tip_mm = Some(tip.into());
        report.removed = removed;
        report.latency_ms = elapsed_ms(&start);
        Ok(report)
    }

    pub fn into_volume(self) -> VoxelVolume {
        Arc::try_unwrap(self.volume).unwrap_or_else(|shared| (*shared).clone())
    }
}

/// Aggregate statistics of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub frames: u64,
    pub carved_frames: u64,
    pub stale_frames: u64,
    pub initial_occupied: u64,
    pub final_occupied: u64,
    pub total_removed: u64,
    /// Records behind the reorder horizon.
    pub late_dropped: usize,
    /// Unparseable stream lines.
    pub skipped: usize,
    /// Frames dropped by the bounded queue on overflow.
    pub queue_dropped: usize,
    pub latency_mean_ms: f64,
    pub latency_p95_ms: f64,
    pub stepping_time_s: f64,
    pub effective_fps: f64,
}

impl ReplaySummary {
    pub fn from_reports(state: &TwinState, reports: &[FrameReport]) -> Self {
        let mut lat: Vec<f64> = reports.iter().map(|r| r.latency_ms).collect();
        lat.sort_by(f64::total_cmp);
        let total_ms: f64 = lat.iter().sum();
        let p95 =
            if lat.is_empty() { 0.0 } else { lat[((0.95 * lat.len() as f64).ceil() as usize).clamp(1, lat.len()) - 1] };
        Self {
            frames: reports.len() as u64,
            carved_frames: reports.iter().filter(|r| !r.stale_pose()).count() as u64,
            stale_frames: reports.iter().filter(|r| r.stale_pose()).count() as u64,
            initial_occupied: state.initial_occupied(),
            final_occupied: state.volume().occupied_count(),
            total_removed: state.carve_log().iter().map(|e| e.removed).sum(),
            late_dropped: 0,
            skipped: 0,
            queue_dropped: 0,
            latency_mean_ms: if lat.is_empty() { 0.0 } else { total_ms / lat.len() as f64 },
            latency_p95_ms: p95,
            stepping_time_s: total_ms / 1e3,
            effective_fps: if total_ms > 0.0 { reports.len() as f64 / (total_ms / 1e3) } else { 0.0 },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

pub struct ReplayOutcome {
    pub state: TwinState,
    pub reports: Vec<FrameReport>,
    pub summary: ReplaySummary,
}

/// Feeds samples, in arrival order, through the reorder buffer and the
/// engine. Output depends only on the inputs.
pub fn replay(
    samples: impl IntoIterator<Item = PoseSample>,
    calibration: CalibrationBundle,
    volume: VoxelVolume,
    options: EngineOptions,
) -> Result<ReplayOutcome, EngineError> {
    calibration.carving_links()?;
    let mut state = TwinState::new(calibration, volume, options);
    let mut pipeline = RecordPipeline::new(options.reorder_window_s);
    let mut reports = Vec::new();
    for s in samples {
        for f in pipeline.push(s) {
            reports.push(state.step(&f)?);
        }
    }
    for f in pipeline.finish() {
        reports.push(state.step(&f)?);
    }
    let mut summary = ReplaySummary::from_reports(&state, &reports);
    summary.late_dropped = pipeline.late_dropped();
    Ok(ReplayOutcome { state, reports, summary })
}

pub fn replay_files(
    pose_log: impl AsRef<Path>,
    calibration: impl AsRef<Path>,
    volume: impl AsRef<Path>,
    options: EngineOptions,
) -> Result<ReplayOutcome, EngineError> {
    let bundle = CalibrationBundle::load(calibration)?;
    let samples = load_pose_log(pose_log)?;
    let vol = VoxelVolume::load(volume)?;
    replay(samples, bundle, vol, options)
}

/// Carve log CSV: `timestamp_s,cx_mm,cy_mm,cz_mm,radius_mm,removed`.
pub fn write_carve_log(mut w: impl Write, log: &[CarveEvent]) -> std::io::Result<()> {
    writeln!(w, "timestamp_s,cx_mm,cy_mm,cz_mm,radius_mm,removed")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            e.timestamp, e.center_mm[0], e.center_mm[1], e.center_mm[2], e.radius_mm, e.removed
        )?;
    }
    Ok(())
}
