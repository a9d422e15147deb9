use std::collections::HashMap;

use crate::error::{Error, Result};

use super::PointCloud;

pub type CellKey = [i64; 3];

/// Partition of a cloud into occupied cubic cells.
///
/// Cells are numbered in order of first appearance, so cell `c`'s lowest point
/// index increases with `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    keys: Vec<CellKey>,
    members: Vec<Vec<usize>>,
    point_cell: Vec<usize>,
    lookup: HashMap<CellKey, usize>,
}

impl VoxelGrid {
    pub fn num_cells(&self) -> usize {
        self.members.len()
    }

    pub fn key(&self, cell: usize) -> CellKey {
        self.keys[cell]
    }

    pub fn members(&self, cell: usize) -> &[usize] {
        &self.members[cell]
    }

    pub fn cell_of_point(&self, point: usize) -> usize {
        self.point_cell[point]
    }

    pub fn cell_at(&self, key: &CellKey) -> Option<usize> {
        self.lookup.get(key).copied()
    }
}

/// Grid plus one representative (lowest index) and majority label per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelization {
    pub grid: VoxelGrid,
    pub representatives: Vec<usize>,
    pub labels: Vec<u16>,
}

pub fn cell_key(p: &[f64; 3], size: f64) -> CellKey {
    [
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    ]
}

/// Majority vote, ties to the smallest label value.
fn majority(labels: impl Iterator<Item = u16>) -> u16 {
    let mut counts: Vec<(u16, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(v, _)| *v == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .unwrap_or(super::IGNORE)
}

pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<Voxelization> {
    if !(voxel_size > 0.0) {
        return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut lookup = HashMap::new();
    let mut keys = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut point_cell = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.positions().iter().enumerate() {
        let key = cell_key(p, voxel_size);
        let cell = *lookup.entry(key).or_insert_with(|| {
            keys.push(key);
            members.push(Vec::new());
            members.len() - 1
        });
        members[cell].push(i);
        point_cell.push(cell);
    }
    let representatives = members.iter().map(|m| m[0]).collect();
    let labels = members
        .iter()
        .map(|m| majority(m.iter().map(|&i| cloud.labels()[i])))
        .collect();
    Ok(Voxelization {
        grid: VoxelGrid {
            voxel_size,
            keys,
            members,
            point_cell,
            lookup,
        },
        representatives,
        labels,
    })
}
