//! Point clouds, nearest-neighbour search and normal estimation.

use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::RigidTransform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("EmptyCloud: point cloud has no points")]
    EmptyCloud,
    #[error("InvalidNormals: {0}")]
    InvalidNormals(String),
}

/// Points in mm, optionally with one unit normal per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points, normals: None }
    }

    /// Normals must be unit length within 1e-6, one per point.
    pub fn with_normals(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self, CloudError> {
        if normals.len() != points.len() {
            return Err(CloudError::InvalidNormals(format!("{} normals for {} points", normals.len(), points.len())));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(CloudError::InvalidNormals(format!("normal {i} is not unit length")));
        }
        Ok(Self { points, normals: Some(normals) })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        centroid(&self.points)
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| t.transform_vector(n)).collect()),
        }
    }

    /// Returns a copy carrying estimated normals when none are present.
    pub fn ensure_normals(&self, neighbours: usize) -> Result<PointCloud, CloudError> {
        if self.normals.is_some() {
            return Ok(self.clone());
        }
        let normals = estimate_normals(&self.points, neighbours)?;
        Ok(PointCloud { points: self.points.clone(), normals: Some(normals) })
    }
}

pub(crate) fn centroid(points: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    if points.is_empty() {
        return None;
    }
    Some(points.iter().sum::<Vector3<f64>>() / points.len() as f64)
}

/// Exact nearest-neighbour index over a fixed point set.
pub struct NearestNeighbors {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl NearestNeighbors {
    pub fn new(points: &[Vector3<f64>]) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        // Construction only fails for more than u32::MAX items.
        let tree = ImmutableKdTree::new_from_slice(&raw).expect("kd-tree construction");
        Ok(Self { tree, len: points.len() })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `(index, distance)` of the closest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let hit = self.tree.query(&[q.x, q.y, q.z]).nearest_one::<SquaredEuclidean<f64>>().execute();
        (hit.item as usize, hit.distance.sqrt())
    }

    /// Indices of the `k` closest points, nearest first.
    pub fn nearest_k(&self, q: &Vector3<f64>, k: usize) -> Vec<usize> {
        let Some(k) = NonZeroUsize::new(k.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .query(&[q.x, q.y, q.z])
            .nearest_n::<SquaredEuclidean<f64>>(k)
            .execute()
            .into_iter()
            .map(|r| r.item as usize)
            .collect()
    }
}

/// Plane-fit normals over the `k` nearest neighbours, oriented away from the
/// cloud centroid.
pub fn estimate_normals(points: &[Vector3<f64>], k: usize) -> Result<Vec<Vector3<f64>>, CloudError> {
    let index = NearestNeighbors::new(points)?;
    let center = centroid(points).ok_or(CloudError::EmptyCloud)?;
    Ok(points
        .iter()
        .map(|p| {
            let nbrs = index.nearest_k(p, k.max(3));
            let local: Vec<Vector3<f64>> = nbrs.iter().map(|&i| points[i]).collect();
            let mean = centroid(&local).unwrap_or(*p);
            let cov = local.iter().map(|q| (q - mean) * (q - mean).transpose()).sum::<Matrix3<f64>>();
            let eig = cov.symmetric_eigen();
            let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            let mut n: Vector3<f64> = eig.eigenvectors.column(imin).into_owned();
            n /= n.norm();
            if n.dot(&(p - center)) < 0.0 {
                n = -n;
            }
            n
        })
        .collect())
}
