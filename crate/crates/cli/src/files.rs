//! CLI-side file formats: point and trajectory CSVs, pattern pose logs, PLY
//! output, JSON helpers, and the error type that picks the exit code.

use std::fmt;
use std::io::Write;
use std::path::Path;

use drilltwin::calibration::CalibrationError;
use drilltwin::camera::CameraError;
use drilltwin::engine::EngineError;
use drilltwin::error_budget::BudgetError;
use drilltwin::volume::VolumeError;
use drilltwin::RigidTransform;
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A command failure: solver errors exit 1, file and format errors exit 2.
#[derive(Debug)]
pub enum Failure {
    Solver { name: String, message: String },
    File { name: String, message: String },
}

impl Failure {
    pub fn file(name: &str, message: impl fmt::Display) -> Self {
        Self::File { name: name.to_owned(), message: message.to_string() }
    }

    pub fn solver(name: &str, message: impl fmt::Display) -> Self {
        Self::Solver { name: name.to_owned(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Solver { .. } => 1,
            Self::File { .. } => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Solver { name, message } | Self::File { name, message } => {
                // Library messages already lead with the error name.
                if message.starts_with(name.as_str()) {
                    write!(f, "{message}")
                } else {
                    write!(f, "{name}: {message}")
                }
            }
        }
    }
}

impl From<CalibrationError> for Failure {
    fn from(e: CalibrationError) -> Self {
        Self::solver(e.name(), &e)
    }
}

impl From<BudgetError> for Failure {
    fn from(e: BudgetError) -> Self {
        match e {
            BudgetError::DegenerateMarkers(_) => Self::solver(e.name(), &e),
            BudgetError::InvalidInput(_) => Self::file(e.name(), &e),
        }
    }
}

impl From<VolumeError> for Failure {
    fn from(e: VolumeError) -> Self {
        Self::file(e.name(), &e)
    }
}

impl From<CameraError> for Failure {
    fn from(e: CameraError) -> Self {
        match e {
            CameraError::BehindCamera(_) => Self::solver(e.name(), &e),
            _ => Self::file(e.name(), &e),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::MissingCalibration(_) => Self::solver(e.name(), &e),
            _ => Self::file(e.name(), &e),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn io_failure(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::file("IoError", format!("{}: {e}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::file("FormatError", format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, Failure> {
    let f = std::fs::File::open(path).map_err(|e| io_failure(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let mut rdr = csv_reader(path)?;
    rdr.deserialize()
        .enumerate()
        .map(|(n, r)| r.map_err(|e| Failure::file("FormatError", format!("{} line {}: {e}", path.display(), n + 2))))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> CmdResult {
    let f = std::fs::File::create(path).map_err(|e| io_failure(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    if rows.is_empty() {
        w.write_record(header).map_err(|e| io_failure(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| io_failure(path, e))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRow {
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

/// Point CSV with header `x_mm,y_mm,z_mm`.
pub fn read_points(path: &Path) -> Result<Vec<Vector3<f64>>, Failure> {
    Ok(read_rows::<PointRow>(path)?.into_iter().map(|r| Vector3::new(r.x_mm, r.y_mm, r.z_mm)).collect())
}

pub fn write_points(path: &Path, points: &[Vector3<f64>]) -> CmdResult {
    let rows: Vec<PointRow> = points.iter().map(|p| PointRow { x_mm: p.x, y_mm: p.y, z_mm: p.z }).collect();
    write_rows(path, &["x_mm", "y_mm", "z_mm"], &rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    px_mm: f64,
    py_mm: f64,
    pz_mm: f64,
    qx_mm: f64,
    qy_mm: f64,
    qz_mm: f64,
}

type Trajectory = (Vec<Vector3<f64>>, Vec<Vector3<f64>>);

/// Paired shaft-axis / tracked trajectory CSV:
/// `px_mm,py_mm,pz_mm,qx_mm,qy_mm,qz_mm`.
pub fn read_trajectory(path: &Path) -> Result<Trajectory, Failure> {
    let rows = read_rows::<TrajectoryRow>(path)?;
    Ok(rows.iter().map(|r| (Vector3::new(r.px_mm, r.py_mm, r.pz_mm), Vector3::new(r.qx_mm, r.qy_mm, r.qz_mm))).unzip())
}

pub fn write_trajectory(path: &Path, p: &[Vector3<f64>], q: &[Vector3<f64>]) -> CmdResult {
    let rows: Vec<TrajectoryRow> = p
        .iter()
        .zip(q)
        .map(|(a, b)| TrajectoryRow { px_mm: a.x, py_mm: a.y, pz_mm: a.z, qx_mm: b.x, qy_mm: b.y, qz_mm: b.z })
        .collect();
    write_rows(path, &["px_mm", "py_mm", "pz_mm", "qx_mm", "qy_mm", "qz_mm"], &rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct TimedPoseRow {
    timestamp_s: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx_mm: f64,
    ty_mm: f64,
    tz_mm: f64,
}

/// Timestamped pose CSV without a frame column (pattern-in-camera poses):
/// `timestamp_s,qw,qx,qy,qz,tx_mm,ty_mm,tz_mm`.
pub fn read_timed_poses(path: &Path) -> Result<Vec<(f64, RigidTransform)>, Failure> {
    read_rows::<TimedPoseRow>(path)?
        .into_iter()
        .enumerate()
        .map(|(n, r)| {
            RigidTransform::from_quaternion_wxyz([r.qw, r.qx, r.qy, r.qz], Vector3::new(r.tx_mm, r.ty_mm, r.tz_mm))
                .map(|t| (r.timestamp_s, t))
                .map_err(|e| Failure::file("FormatError", format!("{} line {}: {e}", path.display(), n + 2)))
        })
        .collect()
}

pub fn write_timed_poses(path: &Path, poses: &[(f64, RigidTransform)]) -> CmdResult {
    let rows: Vec<TimedPoseRow> = poses
        .iter()
        .map(|(t, p)| {
            let q = p.quaternion_wxyz();
            let x = p.translation();
            TimedPoseRow { timestamp_s: *t, qw: q[0], qx: q[1], qy: q[2], qz: q[3], tx_mm: x.x, ty_mm: x.y, tz_mm: x.z }
        })
        .collect();
    write_rows(path, &["timestamp_s", "qw", "qx", "qy", "qz", "tx_mm", "ty_mm", "tz_mm"], &rows)
}

/// ASCII PLY with a per-vertex `distance` property.
pub fn write_distance_ply(path: &Path, points: &[Vector3<f64>], distances: &[f64]) -> CmdResult {
    let f = std::fs::File::create(path).map_err(|e| io_failure(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
        writeln!(w, "property float x\nproperty float y\nproperty float z\nproperty float distance\nend_header")?;
        for (p, d) in points.iter().zip(distances) {
            writeln!(w, "{} {} {} {}", p.x, p.y, p.z, d)?;
        }
        w.flush()
    };
    write().map_err(|e| io_failure(path, e))
}

/// Prints a line on stdout. A closed reader (`| head`) ends the process quietly.
pub fn emit(text: impl std::fmt::Display) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{text}").and_then(|()| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("stdout: {e}");
    }
}
