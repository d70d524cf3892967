//! Pose-log CSV rows and newline-delimited JSON stream records.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::geometry::RigidTransform;

pub const POSE_LOG_HEADER: [&str; 9] = ["timestamp_s", "frame_id", "qw", "qx", "qy", "qz", "tx_mm", "ty_mm", "tz_mm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameId {
    DrillBase,
    PhantomBase,
    CameraBase,
}

impl FrameId {
    pub const ALL: [FrameId; 3] = [FrameId::DrillBase, FrameId::PhantomBase, FrameId::CameraBase];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::DrillBase => "drill_base",
            Self::PhantomBase => "phantom_base",
            Self::CameraBase => "camera_base",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for FrameId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "drill_base" => Ok(Self::DrillBase),
            "phantom_base" => Ok(Self::PhantomBase),
            "camera_base" => Ok(Self::CameraBase),
            other => Err(format!("unknown frame id {other:?}")),
        }
    }
}

impl std::fmt::Display for FrameId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One tracked marker-body pose in the tracker frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub timestamp: f64,
    pub frame_id: FrameId,
    pub pose: RigidTransform,
}

impl PoseSample {
    pub fn new(timestamp: f64, frame_id: FrameId, pose: RigidTransform) -> Result<Self, EngineError> {
        if !timestamp.is_finite() {
            return Err(EngineError::Format(format!("non-finite timestamp {timestamp}")));
        }
        Ok(Self { timestamp, frame_id, pose })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseLogRow {
    timestamp_s: f64,
    frame_id: String,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx_mm: f64,
    ty_mm: f64,
    tz_mm: f64,
}

fn sample_from_parts(t: f64, frame: &str, q: [f64; 4], p: [f64; 3]) -> Result<PoseSample, String> {
    let frame_id = frame.parse::<FrameId>()?;
    let pose = RigidTransform::from_quaternion_wxyz(q, Vector3::from(p)).map_err(|e| e.to_string())?;
    if !t.is_finite() {
        return Err(format!("non-finite timestamp {t}"));
    }
    Ok(PoseSample { timestamp: t, frame_id, pose })
}

/// Parses a pose log; the header row is mandatory.
pub fn read_pose_log(reader: impl Read) -> Result<Vec<PoseSample>, EngineError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| EngineError::Format(format!("pose log header: {e}")))?;
    if header.iter().map(str::trim).ne(POSE_LOG_HEADER) {
        return Err(EngineError::Format(format!(
            "pose log header must be {}, got {}",
            POSE_LOG_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (n, row) in rdr.deserialize::<PoseLogRow>().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| EngineError::Format(format!("pose log line {line}: {e}")))?;
        let s = sample_from_parts(
            row.timestamp_s,
            &row.frame_id,
            [row.qw, row.qx, row.qy, row.qz],
            [row.tx_mm, row.ty_mm, row.tz_mm],
        )
        .map_err(|e| EngineError::Format(format!("pose log line {line}: {e}")))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_pose_log(writer: impl Write, samples: &[PoseSample]) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        let q = s.pose.quaternion_wxyz();
        let t = s.pose.translation();
        w.serialize(PoseLogRow {
            timestamp_s: s.timestamp,
            frame_id: s.frame_id.as_str().to_owned(),
            qw: q[0],
            qx: q[1],
            qy: q[2],
            qz: q[3],
            tx_mm: t.x,
            ty_mm: t.y,
            tz_mm: t.z,
        })
        .map_err(|e| EngineError::Format(e.to_string()))?;
    }
    if samples.is_empty() {
        w.write_record(POSE_LOG_HEADER).map_err(|e| EngineError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| EngineError::Format(e.to_string()))
}

pub fn load_pose_log(path: impl AsRef<Path>) -> Result<Vec<PoseSample>, EngineError> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| EngineError::io(path, e))?;
    read_pose_log(std::io::BufReader::new(f))
}

pub fn save_pose_log(path: impl AsRef<Path>, samples: &[PoseSample]) -> Result<(), EngineError> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    write_pose_log(std::io::BufWriter::new(f), samples)
}

/// Wire form of a pose sample: `{"t": s, "frame": id, "q": [w,x,y,z], "p": [x,y,z]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamRecord {
    pub t: f64,
    pub frame: String,
    pub q: [f64; 4],
    pub p: [f64; 3],
}

impl From<&PoseSample> for StreamRecord {
    fn from(s: &PoseSample) -> Self {
        Self {
            t: s.timestamp,
            frame: s.frame_id.as_str().to_owned(),
            q: s.pose.quaternion_wxyz(),
            p: (*s.pose.translation()).into(),
        }
    }
}

/// Parses one stream line (without its LF).
pub fn parse_stream_line(line: &str) -> Result<PoseSample, EngineError> {
    let r: StreamRecord =
        serde_json::from_str(line.trim_end_matches('\r')).map_err(|e| EngineError::Format(e.to_string()))?;
    sample_from_parts(r.t, &r.frame, r.q, r.p).map_err(EngineError::Format)
}

/// Serializes one stream line, LF-terminated.
pub fn to_stream_line(sample: &PoseSample) -> String {
    let mut s = serde_json::to_string(&StreamRecord::from(sample)).expect("record serializes");
    s.push('\n');
    s
}
