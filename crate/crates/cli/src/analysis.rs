//! Rendering, scoring and error-budget commands.

use std::path::{Path, PathBuf};

use clap::Args;
use drilltwin::camera::{self, DrillGeometry, Intrinsics, Label, LabelImage, PinholeCamera};
use drilltwin::engine::{load_pose_log, CalibrationBundle, FrameId, PoseSample, RecordPipeline, TwinState};
use drilltwin::error_budget::{budget_report, ChainErrorSpec, MagnitudeSampling, MonteCarloOptions, NominalChain};
use drilltwin::volume::surface_distance;
use drilltwin::{RigidTransform, VoxelVolume};
use serde_json::json;

use crate::files::{emit, io_failure, read_json, write_bytes, write_distance_ply, write_text, CmdResult, Failure};
use crate::EngineArgs;

fn missing(what: &str) -> Failure {
    Failure::solver("MissingCalibration", format!("{what} is not calibrated"))
}

fn load_intrinsics(path: &Path) -> Result<Intrinsics, Failure> {
    let k: Intrinsics = read_json(path)?;
    k.validate()?;
    Ok(k)
}

fn load_drill(path: Option<&Path>) -> Result<DrillGeometry, Failure> {
    let geom = match path {
        Some(p) => read_json(p)?,
        None => DrillGeometry::default(),
    };
    geom.validate()?;
    Ok(geom)
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// `{"fx","fy","cx","cy","width","height"}`.
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// `{"tip_radius","shaft_radius","shaft_length"}` in mm.
    #[arg(long)]
    pub drill: Option<PathBuf>,
    /// Render every Nth frame.
    #[arg(long, default_value_t = 1)]
    pub every: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
}

/// Carves along the log and writes `mask_NNNNNN.pgm` for every Nth frame,
/// viewed from the tracked camera.
pub fn render_masks(args: &RenderArgs) -> CmdResult {
    if args.every == 0 {
        return Err(Failure::file("InvalidInput", "--every must be positive"));
    }
    let bundle = CalibrationBundle::load(&args.bundle)?;
    if bundle.f_cb_c.is_none() {
        return Err(missing("f_cb_c (camera)"));
    }
    let intrinsics = load_intrinsics(&args.intrinsics)?;
    let drill = load_drill(args.drill.as_deref())?;
    let volume = VoxelVolume::load(&args.volume)?;
    let options = args.engine.options()?;
    let samples = load_pose_log(&args.log)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_failure(&args.out_dir, e))?;

    let mut state = TwinState::new(bundle, volume, options);
    let mut pipeline = RecordPipeline::new(options.reorder_window_s);
    let mut frames: Vec<_> = samples.into_iter().flat_map(|s| pipeline.push(s)).collect();
    frames.extend(pipeline.finish());
    let mut written = 0usize;
    for frame in &frames {
        let report = state.step(frame)?;
        if report.frame_index % args.every != 0 {
            continue;
        }
        let snap = state.snapshot();
        let (Some(cam_pose), Some(vol_pose)) = (snap.poses.camera, snap.poses.phantom) else {
            continue;
        };
        let cam = PinholeCamera::new(intrinsics, cam_pose)?;
        let drill_view = snap.poses.drill.as_ref().map(|p| (p, &drill));
        let labels = camera::render(&cam, &snap.volume, &vol_pose, drill_view).labels;
        let path = args.out_dir.join(format!("mask_{:06}.pgm", report.frame_index));
        write_bytes(&path, &labels.to_pgm())?;
        written += 1;
    }
    emit(json!({"frames": frames.len(), "masks": written, "out_dir": args.out_dir}));
    Ok(())
}

#[derive(Args)]
pub struct OverlayArgs {
    /// The last pose of each marker body in this log positions the scene.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Current (partly drilled) volume.
    #[arg(long)]
    pub volume: PathBuf,
    /// Planned target volume on the same grid.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Output base; writes `.ppm`, `.f32` and `.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub range_mm: f64,
}

fn latest_poses(samples: &[PoseSample]) -> [Option<RigidTransform>; 3] {
    let mut best: [Option<&PoseSample>; 3] = [None; 3];
    for s in samples {
        let slot = &mut best[FrameId::ALL.iter().position(|f| *f == s.frame_id).expect("known id")];
        if slot.is_none_or(|b| s.timestamp >= b.timestamp) {
            *slot = Some(s);
        }
    }
    best.map(|s| s.map(|s| s.pose))
}

pub fn overlay(args: &OverlayArgs) -> CmdResult {
    if !(args.range_mm.is_finite() && args.range_mm > 0.0) {
        return Err(Failure::file("InvalidInput", "--range-mm must be positive"));
    }
    let bundle = CalibrationBundle::load(&args.bundle)?;
    let intrinsics = load_intrinsics(&args.intrinsics)?;
    let current = VoxelVolume::load(&args.volume)?;
    let target = VoxelVolume::load(&args.target)?;
    let [_, phantom_base, camera_base] = latest_poses(&load_pose_log(&args.log)?);
    let vol_pose = phantom_base
        .ok_or_else(|| Failure::file("FormatError", "log has no phantom_base pose"))?
        .compose(&bundle.f_pb_p.ok_or_else(|| missing("f_pb_p (phantom registration)"))?);
    let cam_pose = camera_base
        .ok_or_else(|| Failure::file("FormatError", "log has no camera_base pose"))?
        .compose(&bundle.f_cb_c.ok_or_else(|| missing("f_cb_c (camera)"))?);
    let cam = PinholeCamera::new(intrinsics, cam_pose)?;
    let ov = camera::distance_overlay(&cam, &current, &target, &vol_pose, args.range_mm)?;
    let with = |ext: &str| {
        let mut p = args.out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    write_bytes(&with(".ppm"), &ov.to_ppm())?;
    write_bytes(&with(".f32"), &ov.distance_bytes())?;
    write_text(&with(".json"), &ov.sidecar_json())?;
    let visible: Vec<f32> = ov.distance_mm.iter().copied().filter(|d| !d.is_nan()).collect();
    let max = visible.iter().copied().fold(0.0f32, f32::max);
    emit(json!({"width": ov.width, "height": ov.height, "visible_pixels": visible.len(), "max_distance_mm": max}));
    Ok(())
}

fn read_mask(path: &Path) -> Result<LabelImage, Failure> {
    let bytes = std::fs::read(path).map_err(|e| io_failure(path, e))?;
    LabelImage::from_pgm(&bytes).map_err(|e| Failure::file(e.name(), format!("{}: {e}", path.display())))
}

pub fn dice(a: &Path, b: &Path, label: &str) -> CmdResult {
    let label = match label {
        "background" => Label::Background,
        "phantom" => Label::Phantom,
        "drill" => Label::Drill,
        other => {
            return Err(Failure::file("InvalidInput", format!("unknown label {other:?} (background, phantom, drill)")))
        }
    };
    let score = camera::dice(&read_mask(a)?, &read_mask(b)?, label)?;
    emit(format_args!("{score:.6}"));
    Ok(())
}

/// Prints the distance statistics; per-point values go to the PLY.
pub fn compare_volumes(a: &Path, b: &Path, ply: Option<&Path>) -> CmdResult {
    let (va, vb) = (VoxelVolume::load(a)?, VoxelVolume::load(b)?);
    let (sa, sb) = (va.surface_pointcloud(), vb.surface_pointcloud());
    let report = surface_distance(&sa, &sb)?;
    if let Some(path) = ply {
        write_distance_ply(path, sa.points(), &report.per_point_distance)?;
    }
    emit(
        serde_json::to_string_pretty(&json!({
            "points": report.per_point_distance.len(),
            "mean": report.mean,
            "std": report.std,
            "max": report.max,
        }))
        .expect("json"),
    );
    Ok(())
}

#[derive(Args)]
pub struct BudgetArgs {
    /// Rotational error caps per link (deg): pb_p o_pb o_db db_d.
    #[arg(long, num_args = 4, value_names = ["PB_P", "O_PB", "O_DB", "DB_D"], allow_negative_numbers = true)]
    pub alpha_deg: Option<Vec<f64>>,
    /// Translational error caps per link (mm), same order.
    #[arg(long, num_args = 4, value_names = ["PB_P", "O_PB", "O_DB", "DB_D"], allow_negative_numbers = true)]
    pub eps_mm: Option<Vec<f64>>,
    /// Nominal chain JSON with `f_pb_p`, `f_o_pb`, `f_o_db`, `f_db_d`;
    /// bench geometry otherwise.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Monte-Carlo draws.
    #[arg(long, requires = "seed")]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draw a random nominal chain per sample.
    #[arg(long)]
    pub random_chains: bool,
    /// Uniform magnitudes in [0, cap] instead of exactly the caps.
    #[arg(long)]
    pub within_caps: bool,
}

fn four(v: &Option<Vec<f64>>, default: [f64; 4]) -> [f64; 4] {
    v.as_ref().map_or(default, |v| [v[0], v[1], v[2], v[3]])
}

pub fn error_budget(args: &BudgetArgs) -> CmdResult {
    let bench = ChainErrorSpec::bench();
    let chain: NominalChain = match &args.chain {
        Some(p) => read_json(p)?,
        None => bench.chain,
    };
    let spec = ChainErrorSpec::new(four(&args.alpha_deg, bench.alpha_deg), four(&args.eps_mm, bench.eps_mm), chain)?;
    let mc = args.draws.map(|draws| MonteCarloOptions {
        sampling: if args.within_caps { MagnitudeSampling::WithinCaps } else { MagnitudeSampling::AtCaps },
        random_chains: args.random_chains,
        ..MonteCarloOptions::new(draws, args.seed.expect("clap enforces --seed"))
    });
    emit(budget_report(&spec, mc.as_ref()).to_json());
    Ok(())
}
