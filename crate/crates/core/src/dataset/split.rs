use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::RngKey;

use super::scene::{generate_scene, SceneSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Generates `num_scenes` scenes from `template` with seeds `seed + i` and
/// sends a seeded shuffle's first `floor(num_scenes · val_fraction)` to val.
/// Returned clouds are in seed order.
pub fn make_split(
    seed: u64,
    num_scenes: usize,
    val_fraction: f64,
    template: &SceneSpec,
) -> Result<(DatasetSplit, Vec<PointCloud>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("val fraction must be in (0, 1), got {val_fraction}")));
    }
    let clouds = (0..num_scenes)
        .map(|i| {
            let mut spec = template.clone();
            spec.seed = seed.wrapping_add(i as u64);
            generate_scene(&spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..num_scenes).collect();
    order.shuffle(&mut RngKey::new(seed).derive_tag("split").stream());
    let n_val = (num_scenes as f64 * val_fraction).floor() as usize;
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    let ids = |v: Vec<usize>| v.into_iter().map(|i| clouds[i].id().to_string()).collect();
    Ok((
        DatasetSplit {
            train: ids(train),
            val: ids(val),
        },
        clouds,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        let mut s = SceneSpec::new(0);
        s.num_points = 128;
        s
    }

    #[test]
    fn counts_and_disjointness() {
        let (split, clouds) = make_split(100, 10, 0.2, &small()).unwrap();
        assert_eq!((split.train.len(), split.val.len()), (8, 2));
        assert!(split.train.iter().all(|t| !split.val.contains(t)));
        assert_eq!(clouds.len(), 10);
    }

    #[test]
    fn same_seed_same_split() {
        let a = make_split(5, 10, 0.3, &small()).unwrap().0;
        let b = make_split(5, 10, 0.3, &small()).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn scene_seeds_follow_index() {
        let (_, clouds) = make_split(40, 10, 0.2, &small()).unwrap();
        let seeds: Vec<u64> = clouds.iter().map(|c| c.meta().seed.unwrap()).collect();
        assert_eq!(seeds, (40..50).collect::<Vec<_>>());
    }

    #[test]
    fn bad_fraction() {
        assert!(make_split(0, 4, 0.0, &small()).is_err());
        assert!(make_split(0, 4, 1.0, &small()).is_err());
    }
}
