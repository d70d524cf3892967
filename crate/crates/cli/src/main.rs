//! `drilltwin`: calibration, replay and streaming, rendering and error-budget
//! tools for the tracked-drilling twin.

mod analysis;
mod calib;
mod files;
mod synth;
mod twin;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drilltwin::engine::{EngineOptions, FrameId, SubstepPolicy, DEFAULT_REORDER_WINDOW_S};

#[derive(Parser)]
#[command(name = "drilltwin", version, about = "Digital twin tools for tracked bone drilling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tip offset of the drill marker body from a pivoting pose log.
    CalibratePivot {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value = "drill_base")]
        frame: FrameId,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Drill-axis rotation from paired shaft/tracked trajectories.
    CalibrateAxis {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Registers the volume model to surface points sampled on the phantom.
    RegisterIcp(calib::IcpArgs),
    /// Camera-in-marker transform from tracker and pattern pose streams.
    CalibrateHandeye {
        /// Pose log with camera_base samples.
        #[arg(long)]
        tracker: PathBuf,
        /// Pattern-in-camera poses (`timestamp_s,qw,qx,qy,qz,tx_mm,ty_mm,tz_mm`).
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        pairing_window_ms: f64,
    },
    /// Runs a recorded pose log through the twin.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Listens for newline-delimited JSON pose records over TCP.
    Serve {
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Exit after the first client disconnects.
        #[arg(long)]
        once: bool,
        #[arg(long, default_value_t = 4096)]
        queue_capacity: usize,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Renders label masks (PGM) along a pose log.
    RenderMasks(analysis::RenderArgs),
    /// Distance-to-target overlay (PPM, f32 raster and JSON sidecar).
    Overlay(analysis::OverlayArgs),
    /// Dice score of two label masks.
    Dice {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "phantom")]
        label: String,
    },
    /// Surface distance from volume `a` to volume `b`.
    CompareVolumes {
        a: PathBuf,
        b: PathBuf,
        /// Per-point distance PLY.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Worst-case rotation and translation bounds, optionally with Monte-Carlo.
    ErrorBudget(analysis::BudgetArgs),
    /// Synthetic inputs for the other commands.
    #[command(subcommand)]
    Synth(synth::SynthCommand),
}

/// Inputs and outputs shared by `replay` and `serve`.
#[derive(Args)]
pub struct SessionArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out_volume: PathBuf,
    #[arg(long)]
    pub carve_log: Option<PathBuf>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Args, Clone)]
pub struct EngineArgs {
    #[arg(long, default_value_t = drilltwin::engine::DEFAULT_BURR_RADIUS_MM)]
    pub burr_radius_mm: f64,
    #[arg(long, default_value = "capsule")]
    pub substep_policy: SubstepPolicy,
    #[arg(long, default_value_t = 100.0)]
    pub staleness_ms: f64,
    #[arg(long, default_value_t = DEFAULT_REORDER_WINDOW_S * 1e3)]
    pub reorder_ms: f64,
}

impl EngineArgs {
    pub fn options(&self) -> Result<EngineOptions, files::Failure> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.burr_radius_mm.is_finite() && self.burr_radius_mm > 0.0)
            || !ok(self.staleness_ms)
            || !ok(self.reorder_ms)
        {
            return Err(files::Failure::file(
                "InvalidInput",
                "burr radius must be positive; staleness and reorder windows non-negative",
            ));
        }
        Ok(EngineOptions {
            burr_radius_mm: self.burr_radius_mm,
            staleness_s: self.staleness_ms / 1e3,
            substep_policy: self.substep_policy,
            reorder_window_s: self.reorder_ms / 1e3,
        })
    }
}

fn run(cli: Cli) -> files::CmdResult {
    match cli.command {
        Command::CalibratePivot { poses, frame, bundle } => calib::pivot(&poses, frame, &bundle),
        Command::CalibrateAxis { trajectory, bundle } => calib::axis(&trajectory, &bundle),
        Command::RegisterIcp(args) => calib::icp(&args),
        Command::CalibrateHandeye { tracker, pattern, bundle, pairing_window_ms } => {
            calib::handeye(&tracker, &pattern, &bundle, pairing_window_ms / 1e3)
        }
        Command::Replay { log, session } => twin::replay(&log, &session),
        Command::Serve { port, host, once, queue_capacity, session } => {
            twin::serve(&host, port, once, queue_capacity, &session)
        }
        Command::RenderMasks(args) => analysis::render_masks(&args),
        Command::Overlay(args) => analysis::overlay(&args),
        Command::Dice { a, b, label } => analysis::dice(&a, &b, &label),
        Command::CompareVolumes { a, b, ply } => analysis::compare_volumes(&a, &b, ply.as_deref()),
        Command::ErrorBudget(args) => analysis::error_budget(&args),
        Command::Synth(cmd) => synth::run(cmd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
