use std::collections::HashMap;

use crate::linalg::{covariance3, sym3_eigenvalues};

use super::{dist2, NeighborIndex, PointCloud};

/// Density reported for points whose k-th neighbour coincides with them.
pub const DENSITY_CAP: f64 = 1e12;

/// Inverse distance to the k-th nearest neighbour.
pub fn local_density(cloud: &PointCloud, nn: &NeighborIndex) -> Vec<f64> {
    (0..cloud.len())
        .map(|i| {
            let d = *nn.distances(i).last().expect("k >= 1");
            if d > 0.0 {
                (1.0 / d).min(DENSITY_CAP)
            } else {
                DENSITY_CAP
            }
        })
        .collect()
}

/// Surface variation λ3 / (λ1 + λ2 + λ3) of each point's neighbourhood
/// (the point plus its k neighbours). Coincident neighbourhoods score 0.
pub fn local_curvature(cloud: &PointCloud, nn: &NeighborIndex) -> Vec<f64> {
    let pos = cloud.positions();
    (0..cloud.len())
        .map(|i| {
            let hood = std::iter::once(i).chain(nn.neighbors(i).iter().copied()).map(|j| pos[j]);
            let ev = sym3_eigenvalues(covariance3(hood)).map(|l: f64| l.max(0.0));
            let s = ev[0] + ev[1] + ev[2];
            if s > 0.0 {
                ev[2] / s
            } else {
                0.0
            }
        })
        .collect()
}

/// Marks every point within `radius` of a marked point. Radius 0 is the identity.
pub fn dilate_mask(cloud: &PointCloud, mask: &[bool], radius: f64) -> Vec<bool> {
    assert_eq!(mask.len(), cloud.len(), "mask length");
    if radius <= 0.0 || !mask.iter().any(|&m| m) {
        return mask.to_vec();
    }
    let pos = cloud.positions();
    let key = |p: &[f64; 3]| [0, 1, 2].map(|a| (p[a] / radius).floor() as i64);
    let mut marked: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in pos.iter().enumerate() {
        if mask[i] {
            marked.entry(key(p)).or_default().push(i);
        }
    }
    let r2 = radius * radius;
    pos.iter()
        .enumerate()
        .map(|(i, p)| {
            if mask[i] {
                return true;
            }
            let h = key(p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(list) = marked.get(&[h[0] + dx, h[1] + dy, h[2] + dz]) {
                            if list.iter().any(|&j| dist2(p, &pos[j]) <= r2) {
                                return true;
                            }
                        }
                    }
                }
            }
            false
        })
        .collect()
}

/// Azimuthal sector of each point: floor(S·(atan2(y, x) + π) / 2π). The
/// azimuth π wraps onto −π, so sector ids stay below S.
pub fn sector_split(cloud: &PointCloud, num_sectors: usize) -> Vec<usize> {
    assert!(num_sectors >= 2, "need at least two sectors");
    cloud
        .positions()
        .iter()
        .map(|p| {
            let turn = (p[1].atan2(p[0]) + std::f64::consts::PI) / std::f64::consts::TAU;
            ((turn * num_sectors as f64).floor() as usize) % num_sectors
        })
        .collect()
}
