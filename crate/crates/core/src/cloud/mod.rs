//! Point clouds and the structural kernels that operate on them.

mod io;
mod knn;
mod sample;
mod transform;
mod voxel;

pub use io::{parse_ascii, parse_ply, read_cloud, write_cloud, write_cloud_string};
pub use knn::{knn, knn_indices, knn_self, knn_subset, NeighborIndex};
pub use sample::{canonical_seed, farthest_point_sample};
pub(crate) use sample::{canonical_seed_raw, fps_raw};
pub use transform::{augment, normalize_unit_sphere, AugmentSpec, RandomAugment};
pub use voxel::voxel_downsample;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Positions plus optional per-point features, labels and unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Tensor,
    features: Option<Tensor>,
    labels: Option<Vec<usize>>,
    normals: Option<Tensor>,
}

const NORMAL_TOL: f64 = 1e-6;

impl PointCloud {
    pub fn new(positions: Tensor) -> Result<Self> {
        let s = positions.shape();
        if s.len() != 2 || s[1] != 3 {
            return dim_err(format!("positions must be [N, 3], got {s:?}"));
        }
        if s[0] == 0 {
            return dim_err("a point cloud needs at least one point");
        }
        if !positions.all_finite() {
            return Err(Error::Numeric("positions contain non-finite values".into()));
        }
        Ok(Self {
            positions,
            features: None,
            labels: None,
            normals: None,
        })
    }

    /// Cloud from `[x, y, z]` rows.
    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let data = points.iter().flatten().copied().collect();
        Self::new(Tensor::new(&[points.len(), 3], data)?)
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] != self.len() {
            return dim_err(format!("features must be [{}, C], got {s:?}", self.len()));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return dim_err(format!("{} labels for {} points", labels.len(), self.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_normals(mut self, normals: Tensor) -> Result<Self> {
        if normals.shape() != [self.len(), 3] {
            return dim_err(format!("normals must be [{}, 3], got {:?}", self.len(), normals.shape()));
        }
        for (i, row) in normals.data().chunks(3).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORMAL_TOL {
                return Err(Error::Numeric(format!("normal {i} has length {n}, expected 1")));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.positions.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.shape()[1])
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn normals(&self) -> Option<&Tensor> {
        self.normals.as_ref()
    }

    /// Sub-cloud of the given rows (in the given order), attributes included.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return dim_err("cannot select zero points");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!("index {bad} out of range for {} points", self.len())));
        }
        let rows = |t: &Tensor| {
            let w = t.shape()[1];
            let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            Tensor::from_parts(vec![idx.len(), w], data)
        };
        Ok(Self {
            positions: rows(&self.positions),
            features: self.features.as_ref().map(rows),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            normals: self.normals.as_ref().map(rows),
        })
    }

    /// Replaces positions, keeping attributes. Shape must be unchanged.
    pub fn with_positions(mut self, positions: Tensor) -> Result<Self> {
        if positions.shape() != self.positions.shape() {
            return dim_err("replacement positions must keep the shape");
        }
        if !positions.all_finite() {
            return Err(Error::Numeric("positions contain non-finite values".into()));
        }
        self.positions = positions;
        Ok(self)
    }
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
