//! Point-cloud container and the geometric queries built on it.

mod geometry;
mod knn;
mod voxel;

pub use geometry::{dilate_mask, local_curvature, local_density, sector_split, DENSITY_CAP};
pub use knn::{knn, knn_points, NeighborIndex};
pub use voxel::{voxelize, VoxelGrid, Voxelization};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE: u16 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Ingested,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudMeta {
    pub cloud_id: String,
    pub source: Source,
    /// Id of the cloud this one was derived from.
    pub parent: Option<String>,
    /// Generator seed for synthetic scenes.
    pub seed: Option<u64>,
    /// Labels already live in the training taxonomy; label maps refuse these.
    pub labels_unified: bool,
}

impl CloudMeta {
    pub fn new(cloud_id: impl Into<String>, source: Source) -> Self {
        CloudMeta {
            cloud_id: cloud_id.into(),
            source,
            parent: None,
            seed: None,
            labels_unified: source != Source::Ingested,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    labels: Vec<u16>,
    meta: CloudMeta,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, labels: Vec<u16>, meta: CloudMeta) -> Result<Self> {
        if positions.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} positions but {} labels",
                positions.len(),
                labels.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("non-finite coordinate at point {i}")));
        }
        Ok(PointCloud {
            positions,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn meta(&self) -> &CloudMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut CloudMeta {
        &mut self.meta
    }

    pub fn id(&self) -> &str {
        &self.meta.cloud_id
    }

    pub fn into_parts(self) -> (Vec<[f64; 3]>, Vec<u16>, CloudMeta) {
        (self.positions, self.labels, self.meta)
    }

    /// Sub-cloud of the given point indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Largest pairwise extent along the bounding-box diagonal.
    pub fn diameter_bound(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::rng::RngKey;
    use rand::Rng;

    pub fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![0; n], CloudMeta::new("t", Source::Synthetic)).unwrap()
    }

    pub fn random_points(n: usize, seed: u64, extent: f64) -> Vec<[f64; 3]> {
        let mut rng = RngKey::new(seed).stream();
        (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-extent..extent)))
            .collect()
    }
}
