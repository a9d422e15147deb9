use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{CloudMeta, PointCloud, Source};
use crate::rng::RngKey;

/// Class names of the synthetic taxonomy, indexed by class id.
pub const SYNTHETIC_CLASSES: [&str; 8] = [
    "road",
    "sidewalk",
    "car",
    "building",
    "vegetation",
    "trunk",
    "pole",
    "traffic-sign",
];

const ROAD: usize = 0;
const SIDEWALK: usize = 1;
const CAR: usize = 2;
const BUILDING: usize = 3;
const VEGETATION: usize = 4;
const TRUNK: usize = 5;
const POLE: usize = 6;
const SIGN: usize = 7;

/// Share of the point budget per class before renormalizing over enabled ones.
const CLASS_WEIGHTS: [f64; 8] = [0.28, 0.14, 0.14, 0.15, 0.12, 0.05, 0.05, 0.07];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneLayout {
    /// Scene spans x ∈ [-half_length, half_length].
    pub half_length: f64,
    pub road_half_width: f64,
    pub sidewalk_width: f64,
    pub curb_height: f64,
    pub cars: usize,
    pub buildings: usize,
    pub trees: usize,
    pub poles: usize,
    pub signs: usize,
    /// Gaussian range noise added to every surface sample.
    pub sensor_noise: f64,
    pub enabled: [bool; 8],
}

impl Default for SceneLayout {
    fn default() -> Self {
        SceneLayout {
            half_length: 20.0,
            road_half_width: 4.0,
            sidewalk_width: 2.5,
            curb_height: 0.15,
            cars: 4,
            buildings: 4,
            trees: 4,
            poles: 3,
            signs: 3,
            sensor_noise: 0.01,
            enabled: [true; 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_points: usize,
    pub class_count: usize,
    #[serde(default)]
    pub layout: SceneLayout,
}

impl SceneSpec {
    pub fn new(seed: u64) -> Self {
        SceneSpec {
            seed,
            num_points: 4096,
            class_count: 8,
            layout: SceneLayout::default(),
        }
    }

    fn class_enabled(&self, c: usize) -> bool {
        c < self.class_count && self.layout.enabled[c]
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Horizontal rectangle at height z.
    Slab { x: [f64; 2], y: [f64; 2], z: f64 },
    /// Axis-aligned box surface without its bottom face.
    Box { lo: [f64; 3], hi: [f64; 3] },
    /// Vertical cylinder side surface.
    Cylinder { cx: f64, cy: f64, r: f64, z: [f64; 2] },
    /// Anisotropic Gaussian blob.
    Blob { c: [f64; 3], sigma: [f64; 3] },
}

struct Primitive {
    class: usize,
    shape: Shape,
}

fn sample_shape(shape: &Shape, rng: &mut impl Rng) -> [f64; 3] {
    match *shape {
        Shape::Slab { x, y, z } => [rng.random_range(x[0]..x[1]), rng.random_range(y[0]..y[1]), z],
        Shape::Box { lo, hi } => {
            let (dx, dy, dz) = (hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]);
            // top, ±x faces, ±y faces, area weighted
            let areas = [dx * dy, dy * dz, dy * dz, dx * dz, dx * dz];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            match face {
                0 => [lo[0] + u * dx, lo[1] + v * dy, hi[2]],
                1 => [lo[0], lo[1] + u * dy, lo[2] + v * dz],
                2 => [hi[0], lo[1] + u * dy, lo[2] + v * dz],
                3 => [lo[0] + u * dx, lo[1], lo[2] + v * dz],
                _ => [lo[0] + u * dx, hi[1], lo[2] + v * dz],
            }
        }
        Shape::Cylinder { cx, cy, r, z } => {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            [cx + r * a.cos(), cy + r * a.sin(), rng.random_range(z[0]..z[1])]
        }
        Shape::Blob { c, sigma } => [0, 1, 2].map(|i| {
            let n: f64 = rng.sample(StandardNormal);
            c[i] + sigma[i] * n
        }),
    }
}

fn layout(spec: &SceneSpec) -> Vec<Primitive> {
    let l = &spec.layout;
    let key = RngKey::new(spec.seed).derive_tag("layout");
    let mut rng = key.stream();
    let (hl, rw, sw) = (l.half_length, l.road_half_width, l.sidewalk_width);
    let side = |rng: &mut rand_chacha::ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut prims = Vec::new();
    let mut add = |class: usize, shape: Shape| {
        if spec.class_enabled(class) {
            prims.push(Primitive { class, shape });
        }
    };
    add(ROAD, Shape::Slab { x: [-hl, hl], y: [-rw, rw], z: 0.0 });
    for s in [-1.0, 1.0] {
        let y = if s > 0.0 { [rw, rw + sw] } else { [-rw - sw, -rw] };
        add(SIDEWALK, Shape::Slab { x: [-hl, hl], y, z: l.curb_height });
    }
    for _ in 0..l.cars {
        let cx = rng.random_range(-hl + 3.0..hl - 3.0);
        let cy = side(&mut rng) * rng.random_range(0.8..rw - 1.2);
        let (len, wid, h) = (rng.random_range(3.8..4.8), rng.random_range(1.7..2.0), rng.random_range(1.4..1.8));
        add(
            CAR,
            Shape::Box {
                lo: [cx - len / 2.0, cy - wid / 2.0, 0.25],
                hi: [cx + len / 2.0, cy + wid / 2.0, h],
            },
        );
    }
    for _ in 0..l.buildings {
        let s = side(&mut rng);
        let cx = rng.random_range(-hl + 4.0..hl - 4.0);
        let (wid, dep, h) = (rng.random_range(6.0..10.0), rng.random_range(4.0..6.0), rng.random_range(5.0..10.0));
        let near = rw + sw + rng.random_range(0.5..1.5);
        let (y0, y1) = if s > 0.0 { (near, near + dep) } else { (-near - dep, -near) };
        add(
            BUILDING,
            Shape::Box {
                lo: [cx - wid / 2.0, y0, l.curb_height],
                hi: [cx + wid / 2.0, y1, l.curb_height + h],
            },
        );
    }
    for _ in 0..l.trees {
        let s = side(&mut rng);
        let cx = rng.random_range(-hl + 1.0..hl - 1.0);
        let cy = s * (rw + sw * rng.random_range(0.3..0.7));
        let h = rng.random_range(2.2..3.0);
        add(TRUNK, Shape::Cylinder { cx, cy, r: 0.2, z: [l.curb_height, l.curb_height + h] });
        add(
            VEGETATION,
            Shape::Blob {
                c: [cx, cy, l.curb_height + h + 1.0],
                sigma: [1.0, 1.0, 0.7],
            },
        );
    }
    for _ in 0..l.poles {
        let s = side(&mut rng);
        let cx = rng.random_range(-hl + 1.0..hl - 1.0);
        let cy = s * (rw + 0.3);
        add(POLE, Shape::Cylinder { cx, cy, r: 0.08, z: [l.curb_height, l.curb_height + 4.5] });
    }
    for _ in 0..l.signs {
        let s = side(&mut rng);
        let cx = rng.random_range(-hl + 1.0..hl - 1.0);
        let cy = s * (rw + 0.5);
        let z0 = l.curb_height + rng.random_range(2.0..2.6);
        add(
            SIGN,
            Shape::Box {
                lo: [cx - 0.4, cy - 0.02, z0],
                hi: [cx + 0.4, cy + 0.02, z0 + 0.6],
            },
        );
    }
    prims
}

/// Deterministic street scene. Point `j` of primitive `p` is drawn from the
/// stream keyed by `(seed, p, j)`.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    if spec.num_points < 64 {
        return Err(Error::invalid(format!("scene needs at least 64 points, got {}", spec.num_points)));
    }
    if spec.class_count == 0 || spec.class_count > SYNTHETIC_CLASSES.len() {
        return Err(Error::invalid(format!("synthetic class count must be 1..=8, got {}", spec.class_count)));
    }
    let prims = layout(spec);
    if prims.is_empty() {
        return Err(Error::invalid("scene has no enabled primitive"));
    }
    // point budget per class, remainder to the first enabled class
    let present: Vec<usize> = (0..8).filter(|&c| prims.iter().any(|p| p.class == c)).collect();
    let wsum: f64 = present.iter().map(|&c| CLASS_WEIGHTS[c]).sum();
    let mut budget = [0usize; 8];
    for &c in &present {
        budget[c] = (CLASS_WEIGHTS[c] / wsum * spec.num_points as f64).floor() as usize;
    }
    let assigned: usize = budget.iter().sum();
    budget[present[0]] += spec.num_points - assigned;

    let root = RngKey::new(spec.seed);
    let noise = spec.layout.sensor_noise;
    let mut positions = Vec::with_capacity(spec.num_points);
    let mut labels = Vec::with_capacity(spec.num_points);
    for &c in &present {
        let members: Vec<(usize, &Primitive)> = prims.iter().enumerate().filter(|(_, p)| p.class == c).collect();
        let share = budget[c] / members.len();
        let extra = budget[c] % members.len();
        for (m, (pi, prim)) in members.iter().enumerate() {
            let count = share + usize::from(m < extra);
            let pkey = root.derive(*pi as u64);
            for j in 0..count {
                let mut rng = pkey.derive(j as u64).stream();
                let mut p = sample_shape(&prim.shape, &mut rng);
                if noise > 0.0 {
                    for v in p.iter_mut() {
                        let n: f64 = rng.sample(StandardNormal);
                        *v += noise * n;
                    }
                }
                positions.push(p);
                labels.push(prim.class as u16);
            }
        }
    }
    let mut meta = CloudMeta::new(format!("scene-{}", spec.seed), Source::Synthetic);
    meta.seed = Some(spec.seed);
    PointCloud::new(positions, labels, meta)
}
