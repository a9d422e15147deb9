//! Segmentation metrics, SSR-ratio curves, high-distortion subregion scores
//! and teacher agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig, AugmentPreset};
use crate::error::Result;
use crate::pointcloud::{knn, local_curvature, local_density, NeighborIndex, PointCloud, IGNORE};
use crate::rng::RngKey;
use crate::segnet::{prepare, SegModel};
use crate::ssr::{localize, ssr_ratio, PriorSnapshot};

/// Raw true-positive / false-positive / false-negative counts per class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// `matrix[a][b]`: points of true class `a` predicted as `b`.
    pub matrix: Vec<Vec<u64>>,
}

impl Counts {
    pub fn new(classes: usize) -> Self {
        Counts {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            matrix: vec![vec![0; classes]; classes],
        }
    }

    /// Adds one cloud's predictions; ignore labels are skipped.
    pub fn add(&mut self, preds: &[u16], labels: &[u16]) {
        assert_eq!(preds.len(), labels.len(), "prediction/label length");
        let c = self.tp.len();
        for (&p, &l) in preds.iter().zip(labels) {
            if l == IGNORE || l as usize >= c {
                continue;
            }
            let (p, l) = (p as usize, l as usize);
            assert!(p < c, "prediction {p} out of range for {c} classes");
            self.matrix[l][p] += 1;
            if p == l {
                self.tp[l] += 1;
            } else {
                self.fn_[l] += 1;
                self.fp[p] += 1;
            }
        }
    }

    pub fn iou(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = (0..self.tp.len())
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let miou_all = per_class.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / per_class.len().max(1) as f64;
        IouReport {
            per_class,
            miou,
            miou_all,
            point_counts: self.matrix.iter().map(|r| r.iter().sum()).collect(),
        }
    }

    /// Row-normalized confusion; rows without true points stay zero.
    pub fn confusion(&self) -> Vec<Vec<f64>> {
        self.matrix
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&v| if total == 0 { 0.0 } else { v as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes with no true or predicted point.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that appear.
    pub miou: f64,
    /// Mean over all classes, absent ones scored 0.
    pub miou_all: f64,
    /// True points per class.
    pub point_counts: Vec<u64>,
}

pub fn iou(preds: &[u16], labels: &[u16], classes: usize) -> IouReport {
    let mut c = Counts::new(classes);
    c.add(preds, labels);
    c.iou()
}

pub fn confusion(preds: &[u16], labels: &[u16], classes: usize) -> Vec<Vec<f64>> {
    let mut c = Counts::new(classes);
    c.add(preds, labels);
    c.confusion()
}

/// Lower-rank percentile: the value at sorted index `floor(q·(n−1))`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).floor() as usize]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubregionMetrics {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub mask_fraction: f64,
    pub density_threshold: f64,
    pub curvature_threshold: f64,
}

pub const HIGH_DIST_K: usize = 32;
pub const DENSITY_QUANTILE: f64 = 0.10;
pub const CURVATURE_QUANTILE: f64 = 0.90;

/// Points with low density or high curvature.
pub fn high_distortion_mask(cloud: &PointCloud, nn: &NeighborIndex) -> (Vec<bool>, f64, f64) {
    let density = local_density(cloud, nn);
    let curvature = local_curvature(cloud, nn);
    let tau_d = percentile(&density, DENSITY_QUANTILE);
    let tau_c = percentile(&curvature, CURVATURE_QUANTILE);
    let mask = density.iter().zip(&curvature).map(|(&d, &c)| d <= tau_d || c >= tau_c).collect();
    (mask, tau_d, tau_c)
}

/// IoU restricted to the high-distortion subregion of `cloud`.
pub fn high_distortion_eval(
    preds: &[u16],
    labels: &[u16],
    cloud: &PointCloud,
    nn: &NeighborIndex,
    classes: usize,
) -> SubregionMetrics {
    let (mask, tau_d, tau_c) = high_distortion_mask(cloud, nn);
    let p: Vec<u16> = preds.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let l: Vec<u16> = labels.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let r = iou(&p, &l, classes);
    SubregionMetrics {
        per_class: r.per_class,
        miou: r.miou,
        mask_fraction: p.len() as f64 / mask.len().max(1) as f64,
        density_threshold: tau_d,
        curvature_threshold: tau_c,
    }
}

/// Fraction of masked rows where student and teacher agree; `None` for an
/// empty mask.
pub fn ssr_agreement(student: &[u16], teacher: &[u16], mask: &[bool]) -> Option<f64> {
    let mut n = 0usize;
    let mut agree = 0usize;
    for ((s, t), &m) in student.iter().zip(teacher).zip(mask) {
        if m {
            n += 1;
            agree += (s == t) as usize;
        }
    }
    (n > 0).then(|| agree as f64 / n as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Metrics for one model over a set of clouds under one augmentation level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: String,
    pub seed: u64,
    pub config_hash: String,
    pub epoch: Option<usize>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub miou_all: f64,
    pub confusion: Vec<Vec<f64>>,
    pub point_counts: Vec<u64>,
    /// Mean SSR ratio keyed by augmentation level.
    pub ssr_ratio: BTreeMap<String, f64>,
    pub subregion: Option<SubregionMetrics>,
    pub teacher_agreement: Option<f64>,
}

/// Options for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub preset: AugmentPreset,
    pub voxel_size: f64,
    pub key: RngKey,
    pub snapshot: Option<&'a PriorSnapshot>,
    pub dilation_radius: f64,
    pub teacher: Option<&'a SegModel>,
    pub subregion: bool,
}

/// Augments each cloud once at `opts.preset` (none = clean) and pools the
/// voxel-row predictions. With a snapshot, SSR ratio and teacher agreement
/// inside SSR are reported too.
pub fn evaluate(model: &SegModel, clouds: &[PointCloud], opts: &EvalOptions<'_>) -> Result<MetricsReport> {
    let c = model.class_count;
    let mut counts = Counts::new(c);
    let mut sub_counts = Counts::new(c);
    let mut sub_total = 0usize;
    let mut sub_rows = 0usize;
    let mut taus = (0.0, 0.0);
    let mut ratios = Vec::new();
    let mut agree = (0usize, 0usize);
    let cfg = AugmentConfig::preset(opts.preset);
    for (i, cloud) in clouds.iter().enumerate() {
        let aug = augment_pair(cloud, &cfg, opts.key.derive(i as u64), None)?;
        let prep = prepare(&aug.cloud, opts.voxel_size)?;
        let pred = model.predict(&prep.features)?;
        counts.add(&pred.classes, &prep.labels);
        let rows = prep.row_cloud(&aug.cloud);
        if opts.subregion && rows.len() > HIGH_DIST_K {
            let nn = knn(&rows, HIGH_DIST_K)?;
            let (mask, td, tc) = high_distortion_mask(&rows, &nn);
            taus = (td, tc);
            for (r, &m) in mask.iter().enumerate() {
                if m {
                    sub_counts.add(&pred.classes[r..=r], &prep.labels[r..=r]);
                    sub_rows += 1;
                }
            }
            sub_total += mask.len();
        }
        if let Some(snap) = opts.snapshot {
            let masks = localize(snap, pred.probs.values(), &prep.labels, &rows, opts.dilation_radius)?;
            ratios.push(ssr_ratio(&masks));
            if let Some(teacher) = opts.teacher {
                let tp = teacher.predict(&prep.features)?;
                for r in 0..masks.ssr.len() {
                    if masks.ssr[r] {
                        agree.1 += 1;
                        agree.0 += (tp.classes[r] == pred.classes[r]) as usize;
                    }
                }
            }
        }
    }
    let r = counts.iou();
    let mut ssr = BTreeMap::new();
    if !ratios.is_empty() {
        ssr.insert(opts.preset.name().to_string(), ratios.iter().sum::<f64>() / ratios.len() as f64);
    }
    let subregion = (opts.subregion && sub_total > 0).then(|| {
        let s = sub_counts.iou();
        SubregionMetrics {
            per_class: s.per_class,
            miou: s.miou,
            mask_fraction: sub_rows as f64 / sub_total as f64,
            density_threshold: taus.0,
            curvature_threshold: taus.1,
        }
    });
    Ok(MetricsReport {
        level: opts.preset.name().to_string(),
        seed: opts.key.0,
        config_hash: String::new(),
        epoch: None,
        per_class_iou: r.per_class,
        miou: r.miou,
        miou_all: r.miou_all,
        confusion: counts.confusion(),
        point_counts: r.point_counts,
        ssr_ratio: ssr,
        subregion,
        teacher_agreement: (agree.1 > 0).then(|| agree.0 as f64 / agree.1 as f64),
    })
}

/// Mean SSR ratio per level over `trials` augmentations of each cloud.
///
/// Draw `t` of cloud `i` uses the same key at every level, so the levels see
/// the same uniform variates mapped into their own boxes (common random
/// numbers) and differ only in magnitude.
pub fn ssr_curve(
    model: &SegModel,
    snap: &PriorSnapshot,
    clouds: &[PointCloud],
    levels: &[AugmentPreset],
    trials: usize,
    voxel_size: f64,
    dilation_radius: f64,
    key: RngKey,
) -> Result<Vec<(AugmentPreset, f64)>> {
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let cfg = AugmentConfig::preset(level);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, cloud) in clouds.iter().enumerate() {
            for t in 0..trials {
                let k = key.derive(i as u64).derive(t as u64);
                let aug = augment_pair(cloud, &cfg, k, None)?;
                let prep = prepare(&aug.cloud, voxel_size)?;
                let pred = model.predict(&prep.features)?;
                let rows = prep.row_cloud(&aug.cloud);
                let masks = localize(snap, pred.probs.values(), &prep.labels, &rows, dilation_radius)?;
                sum += ssr_ratio(&masks);
                n += 1;
            }
        }
        out.push((level, if n == 0 { 0.0 } else { sum / n as f64 }));
    }
    Ok(out)
}
