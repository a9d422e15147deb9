//! Per-voxel segmentation network: local-statistics features, an MLP over
//! them, and the voxel-wise cross-entropy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pointcloud::{knn, local_density, voxelize, NeighborIndex, PointCloud, Voxelization, IGNORE};
use crate::rng::RngKey;
use crate::tensor::Var;
use crate::{ParamSet, Tape, Tensor};

pub const FEATURE_DIM: usize = 8;
pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];
pub const LEAKY_SLOPE: f64 = 0.01;
/// Neighbourhood size for feature statistics.
pub const FEATURE_K: usize = 16;

/// Fixed input scaling: coordinates, mean offset, covariance trace. Density
/// enters as ln(1 + density).
const XYZ_SCALE: f64 = 0.1;
const OFFSET_SCALE: f64 = 2.0;
const TRACE_SCALE: f64 = 4.0;

/// One row per voxel representative: xyz, mean neighbour offset (3),
/// neighbourhood covariance trace, local density.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub rows: Vec<[f64; FEATURE_DIM]>,
}

impl PointFeatures {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Network input: the scaled feature matrix `[n, FEATURE_DIM]`.
    pub fn normalized(&self) -> Tensor {
        let mut values = Vec::with_capacity(self.rows.len() * FEATURE_DIM);
        for r in &self.rows {
            values.extend(r[..3].iter().map(|v| v * XYZ_SCALE));
            values.extend(r[3..6].iter().map(|v| v * OFFSET_SCALE));
            values.push(r[6] * TRACE_SCALE);
            values.push(r[7].ln_1p());
        }
        Tensor::new(vec![self.rows.len(), FEATURE_DIM], values).expect("row-major feature matrix")
    }
}

/// Features for each representative of `vox`, with neighbourhood statistics
/// over the representative's kNN in the full cloud.
pub fn featurize(cloud: &PointCloud, vox: &Voxelization, nn: &NeighborIndex) -> PointFeatures {
    let pos = cloud.positions();
    let density = local_density(cloud, nn);
    let rows = vox
        .representatives
        .iter()
        .map(|&r| {
            let p = pos[r];
            let hood = nn.neighbors(r);
            let k = hood.len() as f64;
            let mut mean = [0.0; 3];
            for &j in hood {
                for a in 0..3 {
                    mean[a] += pos[j][a];
                }
            }
            mean.iter_mut().for_each(|m| *m /= k);
            let mut trace = 0.0;
            for &j in hood {
                for a in 0..3 {
                    let d = pos[j][a] - mean[a];
                    trace += d * d;
                }
            }
            [
                p[0],
                p[1],
                p[2],
                mean[0] - p[0],
                mean[1] - p[1],
                mean[2] - p[2],
                trace / k,
                density[r],
            ]
        })
        .collect();
    PointFeatures { rows }
}

/// A cloud reduced to network-ready voxel rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub voxels: Voxelization,
    pub features: PointFeatures,
    /// Majority label per voxel.
    pub labels: Vec<u16>,
    /// Coordinates of each representative.
    pub coords: Vec<[f64; 3]>,
}

impl Prepared {
    /// Representative points as their own cloud, for geometric queries on rows.
    pub fn row_cloud(&self, template: &PointCloud) -> PointCloud {
        template.select(&self.voxels.representatives)
    }
}

/// Voxelizes and featurizes. Clouds with a single point get zero
/// neighbourhood statistics and zero density.
pub fn prepare(cloud: &PointCloud, voxel_size: f64) -> Result<Prepared> {
    if cloud.is_empty() {
        return Err(Error::invalid(format!("cloud `{}` is empty", cloud.id())));
    }
    let voxels = voxelize(cloud, voxel_size)?;
    let features = if cloud.len() < 2 {
        let p = cloud.positions()[0];
        PointFeatures {
            rows: vec![[p[0], p[1], p[2], 0.0, 0.0, 0.0, 0.0, 0.0]],
        }
    } else {
        let nn = knn(cloud, FEATURE_K.min(cloud.len() - 1))?;
        featurize(cloud, &voxels, &nn)
    };
    let coords = voxels.representatives.iter().map(|&r| cloud.positions()[r]).collect();
    Ok(Prepared {
        labels: voxels.labels.clone(),
        voxels,
        features,
        coords,
    })
}

/// Appends `prefix.fc{i}.weight` `[in, out]` and `prefix.fc{i}.bias` `[out]`
/// for each consecutive pair in `dims`, Glorot-uniform weights, zero biases.
pub(crate) fn push_dense_stack(params: &mut ParamSet, prefix: &str, dims: &[usize], key: RngKey) {
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = key.derive(i as u64).stream();
        let values = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        params.push(
            format!("{prefix}.fc{i}.weight"),
            Tensor::new(vec![fan_in, fan_out], values).expect("dense weight shape"),
        );
        params.push(format!("{prefix}.fc{i}.bias"), Tensor::zeros(vec![fan_out]));
    }
}

/// Runs a dense stack bound as `[w0, b0, w1, b1, ...]`; leaky relu between
/// layers, none after the last.
pub(crate) fn dense_forward(tape: &mut Tape, vars: &[Var], mut x: Var, slope: f64) -> Result<Var> {
    let layers = vars.len() / 2;
    for (i, wb) in vars.chunks(2).enumerate() {
        let h = tape.matmul(x, wb[0])?;
        x = tape.add(h, wb[1])?;
        if i + 1 < layers {
            x = tape.leaky_relu(x, slope);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub class_count: usize,
    pub params: ParamSet,
}

impl SegModel {
    pub fn new(hidden: &[usize], class_count: usize, key: RngKey) -> Self {
        let mut dims = vec![FEATURE_DIM];
        dims.extend_from_slice(hidden);
        dims.push(class_count);
        let mut params = ParamSet::new();
        push_dense_stack(&mut params, "seg", &dims, key);
        SegModel {
            feature_dim: FEATURE_DIM,
            hidden: hidden.to_vec(),
            class_count,
            params,
        }
    }

    /// Logits `[rows, C]` for bound parameters `vars`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], feats: &PointFeatures) -> Result<Var> {
        let x = tape.constant_tensor(&feats.normalized());
        self.forward_input(tape, vars, x)
    }

    /// Forward on an already normalized input node.
    pub fn forward_input(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.feature_dim {
            return Err(Error::Shape {
                op: "seg forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.feature_dim],
            });
        }
        dense_forward(tape, vars, x, LEAKY_SLOPE)
    }

    /// Gradient-free logits.
    pub fn logits(&self, feats: &PointFeatures) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, feats)?;
        Ok(tape.to_tensor(out))
    }

    pub fn predict(&self, feats: &PointFeatures) -> Result<Prediction> {
        Ok(Prediction::from_logits(&self.logits(feats)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<u16>,
    /// Row-wise softmax `[rows, C]`.
    pub probs: Tensor,
}

impl Prediction {
    pub fn from_logits(logits: &Tensor) -> Self {
        let c = logits.width();
        let mut probs = Vec::with_capacity(logits.numel());
        let mut classes = Vec::with_capacity(logits.rows());
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            classes.push(best as u16);
            let m = row[best];
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / s));
        }
        Prediction {
            classes,
            probs: Tensor::new(logits.shape().to_vec(), probs).expect("same shape as logits"),
        }
    }
}

/// Mean of −log softmax(logits)[label] over rows with a real label and a
/// true mask entry. No qualifying rows gives an exact, gradient-free 0.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[u16], mask: Option<&[bool]>) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || mask.is_some_and(|m| m.len() != labels.len()) {
        return Err(Error::Shape {
            op: "ce_loss",
            lhs: shape,
            rhs: vec![labels.len(), mask.map_or(labels.len(), |m| m.len())],
        });
    }
    let c = shape[1];
    let rows: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != IGNORE && mask.is_none_or(|m| m[i]))
        .collect();
    if let Some(&bad) = rows.iter().find(|&&i| labels[i] as usize >= c) {
        return Err(Error::invalid(format!("label {} out of range for {c} classes", labels[bad])));
    }
    if rows.is_empty() {
        return Ok(tape.constant(vec![], vec![0.0]));
    }
    let mut pick = vec![0.0; labels.len() * c];
    let w = -1.0 / rows.len() as f64;
    for &i in &rows {
        pick[i * c + labels[i] as usize] = w;
    }
    let ls = tape.log_softmax(logits);
    let pick = tape.constant(shape, pick);
    let picked = tape.mul(ls, pick)?;
    Ok(tape.sum(picked))
}
