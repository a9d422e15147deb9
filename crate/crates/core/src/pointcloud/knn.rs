use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{dist2, PointCloud};

/// Exact k nearest neighbours per point, self excluded, sorted ascending with
/// ties broken by the lower point index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

pub fn knn(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    knn_points(cloud.positions(), k)
}

struct Grid {
    cell: f64,
    lo: [i64; 3],
    hi: [i64; 3],
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn build(points: &[[f64; 3]], k: usize) -> Grid {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        // Scenes are mostly 2.5D: size cells so a ground-plane cell holds ~k points.
        let ext = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        let span = ext.iter().copied().fold(0.0, f64::max);
        let floor = (span * 1e-3).max(1e-9);
        let area = ext[0].max(floor) * ext[1].max(floor);
        let mut cell = (area * k as f64 / points.len() as f64).sqrt();
        if !(cell.is_finite() && cell > 0.0) {
            cell = 1.0;
        }
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = [0, 1, 2].map(|a| (p[a] / cell).floor() as i64);
            for a in 0..3 {
                lo[a] = lo[a].min(key[a]);
                hi[a] = hi[a].max(key[a]);
            }
            cells.entry(key).or_default().push(i);
        }
        Grid { cell, lo, hi, cells }
    }
}

fn insert(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
    if best.len() == k && cmp(&cand, best.last().unwrap()).is_ge() {
        return;
    }
    let pos = best.partition_point(|x| cmp(x, &cand).is_lt());
    best.insert(pos, cand);
    best.truncate(k);
}

pub fn knn_points(points: &[[f64; 3]], k: usize) -> Result<NeighborIndex> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("knn needs 0 < k < N, got k={k}, N={n}")));
    }
    let grid = Grid::build(points, k);
    let max_ring = (0..3).map(|a| grid.hi[a] - grid.lo[a]).max().unwrap_or(0) + 1;
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        best.clear();
        let home = [0, 1, 2].map(|a| (p[a] / grid.cell).floor() as i64);
        let mut r: i64 = 0;
        loop {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let key = [home[0] + dx, home[1] + dy, home[2] + dz];
                        if let Some(list) = grid.cells.get(&key) {
                            for &j in list {
                                if j != i {
                                    insert(&mut best, k, (dist2(p, &points[j]), j));
                                }
                            }
                        }
                    }
                }
            }
            // Unvisited cells lie at least r·cell away.
            let reach = r as f64 * grid.cell;
            if (best.len() == k && best[k - 1].0 < reach * reach) || r > max_ring {
                break;
            }
            r += 1;
        }
        for &(d2, j) in &best {
            indices.push(j);
            distances.push(d2.sqrt());
        }
    }
    Ok(NeighborIndex { k, indices, distances })
}
