//! Binary voxel occupancy model of the anatomy.
//!
//! Occupancy is packed one bit per voxel, x fastest, then y, then z. Bit `i`
//! of byte `b` in the serialized payload is voxel `8·b + i`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{NearestNeighbors, PointCloud};

/// Upper bound on `nx·ny·nz`.
pub const MAX_VOXELS: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("InvalidGrid: {0}")]
    InvalidGrid(String),
    #[error("FormatError at byte {offset} of {file}: {message}")]
    FormatError { file: String, offset: u64, message: String },
    #[error("GridMismatch: {0}")]
    GridMismatch(String),
    #[error("EmptyCloud: point cloud has no points")]
    EmptyCloud,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl VolumeError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::InvalidGrid(_) => "InvalidGrid",
            Self::FormatError { .. } => "FormatError",
            Self::GridMismatch(_) => "GridMismatch",
            Self::EmptyCloud => "EmptyCloud",
            Self::Io { .. } => "IoError",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    dims: [usize; 3],
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
    words: Vec<u64>,
    occupied: u64,
}

/// JSON header of the `.vvj` companion file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl VoxelVolume {
    /// An all-free grid. `origin` is the centre of voxel (0, 0, 0).
    pub fn new(dims: [usize; 3], spacing: Vector3<f64>, origin: Vector3<f64>) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::InvalidGrid(format!("dims must be positive, got {dims:?}")));
        }
        let total = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        match total {
            Some(n) if n <= MAX_VOXELS => {}
            _ => return Err(VolumeError::InvalidGrid(format!("{dims:?} exceeds {MAX_VOXELS} voxels"))),
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidGrid(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGrid("origin must be finite".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self { dims, spacing, origin, words: vec![0; n.div_ceil(64)], occupied: 0 })
    }

    /// Same grid with every voxel occupied.
    pub fn solid(dims: [usize; 3], spacing: Vector3<f64>, origin: Vector3<f64>) -> Result<Self, VolumeError> {
        let mut v = Self::new(dims, spacing, origin)?;
        v.fill_with(|_| true);
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> &Vector3<f64> {
        &self.spacing
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.occupied == 0
    }

    pub fn occupied_count(&self) -> u64 {
        self.occupied
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader { dims: self.dims, spacing_mm: self.spacing.into(), origin_mm: self.origin.into() }
    }

    pub fn same_grid(&self, other: &VoxelVolume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + self.spacing.x * i as f64,
            self.origin.y + self.spacing.y * j as f64,
            self.origin.z + self.spacing.z * k as f64,
        )
    }

    #[inline]
    fn bit(&self, idx: usize) -> bool {
        self.words[idx >> 6] >> (idx & 63) & 1 == 1
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bit(self.linear_index(i, j, k))
    }

    /// Occupancy for signed indices; anything outside the grid is free.
    #[inline]
    pub fn get_signed(&self, i: i64, j: i64, k: i64) -> bool {
        if i < 0 || j < 0 || k < 0 {
            return false;
        }
        let (i, j, k) = (i as usize, j as usize, k as usize);
        i < self.dims[0] && j < self.dims[1] && k < self.dims[2] && self.get(i, j, k)
    }

    /// Sets one voxel, keeping the occupied count in sync.
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.linear_index(i, j, k);
        let (w, mask) = (idx >> 6, 1u64 << (idx & 63));
        let was = self.words[w] & mask != 0;
        if was != value {
            self.words[w] ^= mask;
            if value {
                self.occupied += 1;
            } else {
                self.occupied -= 1;
            }
        }
    }

    /// Sets every voxel from a predicate on its centre.
    pub fn fill_with(&mut self, mut occupied: impl FnMut(&Vector3<f64>) -> bool) {
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let c = self.voxel_center(i, j, k);
                    self.set(i, j, k, occupied(&c));
                }
            }
        }
    }

    #[inline]
    fn clear_if_set(&mut self, idx: usize) -> bool {
        let (w, mask) = (idx >> 6, 1u64 << (idx & 63));
        if self.words[w] & mask != 0 {
            self.words[w] &= !mask;
            self.occupied -= 1;
            true
        } else {
            false
        }
    }

    /// Inclusive index range along `axis` covering `[lo, hi]` mm, padded by
    /// one voxel; `None` when it misses the grid.
    fn axis_range(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let o = self.origin[axis];
        let s = self.spacing[axis];
        let a = ((lo - o) / s).floor() - 1.0;
        let b = ((hi - o) / s).ceil() + 1.0;
        let max = (self.dims[axis] - 1) as f64;
        if !(b >= 0.0 && a <= max) {
            return None;
        }
        Some((a.max(0.0) as usize, b.min(max) as usize))
    }

    fn carve_box(
        &mut self,
        lo: Vector3<f64>,
        hi: Vector3<f64>,
        mut inside: impl FnMut(&Vector3<f64>) -> bool,
    ) -> usize {
        let (Some(rx), Some(ry), Some(rz)) =
            (self.axis_range(0, lo.x, hi.x), self.axis_range(1, lo.y, hi.y), self.axis_range(2, lo.z, hi.z))
        else {
            return 0;
        };
        let mut removed = 0;
        for k in rz.0..=rz.1 {
            for j in ry.0..=ry.1 {
                let row = self.linear_index(0, j, k);
                for i in rx.0..=rx.1 {
                    let idx = row + i;
                    if self.bit(idx) && inside(&self.voxel_center(i, j, k)) {
                        self.clear_if_set(idx);
                        removed += 1;
                    }
                }
            }
        }
        removed
    }

    /// Frees every occupied voxel whose centre lies within `radius` of
    /// `center` (volume coordinates, mm). Returns the number of voxels freed.
    pub fn carve_sphere(&mut self, center: &Vector3<f64>, radius: f64) -> usize {
        if !(radius > 0.0) || !center.iter().all(|c| c.is_finite()) {
            return 0;
        }
        let r2 = radius * radius;
        let c = *center;
        self.carve_box(c.add_scalar(-radius), c.add_scalar(radius), |p| (p - c).norm_squared() <= r2)
    }

    /// Frees every occupied voxel whose centre lies within `radius` of the
    /// segment `a`–`b`: the volume swept by a sphere moving from `a` to `b`.
    pub fn carve_capsule(&mut self, a: &Vector3<f64>, b: &Vector3<f64>, radius: f64) -> usize {
        if !(radius > 0.0) || !a.iter().chain(b.iter()).all(|c| c.is_finite()) {
            return 0;
        }
        let (a, b) = (*a, *b);
        let lo = a.inf(&b).add_scalar(-radius);
        let hi = a.sup(&b).add_scalar(radius);
        self.carve_box(lo, hi, |p| within_segment(p, &a, &b, radius))
    }

    /// Iterator over the indices of occupied voxels.
    pub fn occupied_indices(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, _] = self.dims;
        let n = self.len();
        self.words.iter().enumerate().flat_map(move |(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + b)
            })
            .filter(move |&idx| idx < n)
            .map(move |idx| [idx % nx, (idx / nx) % ny, idx / (nx * ny)])
        })
    }

    /// True when an occupied voxel has a free or out-of-grid 6-neighbour.
    pub fn is_exposed(&self, i: usize, j: usize, k: usize) -> bool {
        let (i, j, k) = (i as i64, j as i64, k as i64);
        NEIGHBOURS_6.iter().any(|d| !self.get_signed(i + d[0], j + d[1], k + d[2]))
    }

    /// Surface voxel centres: occupied voxels with at least one exposed face.
    pub fn surface_pointcloud(&self) -> PointCloud {
        PointCloud::new(
            self.occupied_indices()
                .filter(|&[i, j, k]| self.is_exposed(i, j, k))
                .map(|[i, j, k]| self.voxel_center(i, j, k))
                .collect(),
        )
    }

    /// All occupied voxel centres.
    pub fn occupied_pointcloud(&self) -> PointCloud {
        PointCloud::new(self.occupied_indices().map(|[i, j, k]| self.voxel_center(i, j, k)).collect())
    }

    /// Packed occupancy in the interchange layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n_bytes = self.len().div_ceil(8);
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(n_bytes);
        out
    }

    /// Rebuilds a volume from a header and packed payload.
    pub fn from_bytes(header: &VolumeHeader, payload: &[u8], file: &str) -> Result<Self, VolumeError> {
        let mut vol = Self::new(header.dims, Vector3::from(header.spacing_mm), Vector3::from(header.origin_mm))?;
        let n = vol.len();
        let expected = n.div_ceil(8);
        if payload.len() != expected {
            return Err(VolumeError::FormatError {
                file: file.into(),
                offset: payload.len().min(expected) as u64,
                message: format!(
                    "payload holds {} bits but dims {:?} need {} bytes ({} voxels)",
                    payload.len() * 8,
                    header.dims,
                    expected,
                    n
                ),
            });
        }
        if n % 8 != 0 {
            let pad_mask = !((1u8 << (n % 8)) - 1);
            if payload[expected - 1] & pad_mask != 0 {
                return Err(VolumeError::FormatError {
                    file: file.into(),
                    offset: (expected - 1) as u64,
                    message: "padding bits after the last voxel are set".into(),
                });
            }
        }
        for (w, chunk) in vol.words.iter_mut().zip(payload.chunks(8)) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            *w = u64::from_le_bytes(buf);
        }
        vol.occupied = vol.words.iter().map(|w| w.count_ones() as u64).sum();
        Ok(vol)
    }

    /// Writes `<base>.vvj` and `<base>.vvb`; `path` may carry either
    /// extension or none.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VolumeError> {
        let (vvj, vvb) = companion_paths(path.as_ref());
        let header = serde_json::to_string(&self.header()).expect("header serializes");
        write_file(&vvj, header.as_bytes())?;
        write_file(&vvb, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VolumeError> {
        let (vvj, vvb) = companion_paths(path.as_ref());
        let text = read_file(&vvj)?;
        let header_name = vvj.display().to_string();
        let text = String::from_utf8(text).map_err(|e| VolumeError::FormatError {
            file: header_name.clone(),
            offset: e.utf8_error().valid_up_to() as u64,
            message: "header is not UTF-8".into(),
        })?;
        let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| VolumeError::FormatError {
            file: header_name.clone(),
            offset: byte_offset(&text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        let payload = read_file(&vvb)?;
        Self::from_bytes(&header, &payload, &vvb.display().to_string()).map_err(|e| match e {
            VolumeError::InvalidGrid(m) => {
                VolumeError::FormatError { file: header_name.clone(), offset: 0, message: m }
            }
            other => other,
        })
    }
}

const NEIGHBOURS_6: [[i64; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// `dist(p, segment ab) ≤ radius`, evaluated without division so lattice
/// inputs stay exact.
#[inline]
pub fn within_segment(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, radius: f64) -> bool {
    let d = b - a;
    let w = p - a;
    let dd = d.norm_squared();
    let num = w.dot(&d);
    let r2 = radius * radius;
    if dd == 0.0 || num <= 0.0 {
        w.norm_squared() <= r2
    } else if num >= dd {
        (p - b).norm_squared() <= r2
    } else {
        w.norm_squared() * dd - num * num <= r2 * dd
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

/// `(header, payload)` paths for a volume base path.
pub fn companion_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("vvj") | Some("vvb") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut vvj = base.clone().into_os_string();
    vvj.push(".vvj");
    let mut vvb = base.into_os_string();
    vvb.push(".vvb");
    (vvj.into(), vvb.into())
}

fn read_file(path: &Path) -> Result<Vec<u8>, VolumeError> {
    fs::read(path).map_err(|source| VolumeError::Io { path: path.display().to_string(), source })
}

fn write_file(path: &Path, data: &[u8]) -> Result<(), VolumeError> {
    fs::write(path, data).map_err(|source| VolumeError::Io { path: path.display().to_string(), source })
}

/// Per-point nearest-surface distances and their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub per_point_distance: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl DistanceReport {
    pub fn from_distances(per_point_distance: Vec<f64>) -> Self {
        let n = per_point_distance.len().max(1) as f64;
        let mean = per_point_distance.iter().sum::<f64>() / n;
        let var = per_point_distance.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        let max = per_point_distance.iter().cloned().fold(0.0, f64::max);
        Self { per_point_distance, mean, std: var.sqrt(), max }
    }
}

/// For each point of `a`, the distance to the nearest point of `b`. Clouds
/// are expected to be aligned already.
pub fn surface_distance(a: &PointCloud, b: &PointCloud) -> Result<DistanceReport, VolumeError> {
    if a.is_empty() || b.is_empty() {
        return Err(VolumeError::EmptyCloud);
    }
    let index = NearestNeighbors::new(b.points()).map_err(|_| VolumeError::EmptyCloud)?;
    Ok(DistanceReport::from_distances(a.points().iter().map(|p| index.nearest(p).1).collect()))
}
