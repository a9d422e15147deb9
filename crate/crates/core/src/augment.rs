//! Enhanced augmentation space: jitter and exact-count point drop with
//! uniformly sampled magnitudes, plus subsidiary transforms. Every augmented
//! cloud comes with an [`AugmentRecord`] that replays it bit-exactly.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{sector_split, CloudMeta, PointCloud, Source, IGNORE};
use crate::rng::RngKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPreset {
    None,
    Light,
    Moderate,
    Heavy,
    Random,
    Excessive,
}

impl AugmentPreset {
    pub const ALL: [AugmentPreset; 6] = [
        AugmentPreset::None,
        AugmentPreset::Light,
        AugmentPreset::Moderate,
        AugmentPreset::Heavy,
        AugmentPreset::Random,
        AugmentPreset::Excessive,
    ];

    /// `(drop_ratio_range, jitter_std_range)`.
    pub fn ranges(self) -> ([f64; 2], [f64; 2]) {
        match self {
            AugmentPreset::None => ([0.0, 0.0], [0.0, 0.0]),
            AugmentPreset::Light => ([0.1, 0.3], [0.005, 0.015]),
            AugmentPreset::Moderate => ([0.3, 0.5], [0.015, 0.03]),
            AugmentPreset::Heavy => ([0.5, 0.8], [0.03, 0.05]),
            AugmentPreset::Random => ([0.2, 0.8], [0.01, 0.05]),
            AugmentPreset::Excessive => ([0.0, 0.99], [0.0, 0.10]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentPreset::None => "none",
            AugmentPreset::Light => "light",
            AugmentPreset::Moderate => "moderate",
            AugmentPreset::Heavy => "heavy",
            AugmentPreset::Random => "random",
            AugmentPreset::Excessive => "excessive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationConfig {
    pub enabled: bool,
    /// Yaw is drawn from `[-max_yaw, max_yaw]` radians.
    pub max_yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanMixConfig {
    pub enabled: bool,
    pub num_sectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// When set, the preset's drop and jitter boxes replace the explicit ranges.
    pub preset: Option<AugmentPreset>,
    pub jitter_std_range: [f64; 2],
    pub drop_ratio_range: [f64; 2],
    pub rotation: RotationConfig,
    pub scale_range: [f64; 2],
    /// Flip probability for the x and y axes.
    pub flip_prob: [f64; 2],
    pub noise_points: usize,
    pub scanmix: ScanMixConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig::preset(AugmentPreset::Random)
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            preset: Some(AugmentPreset::None),
            jitter_std_range: [0.0, 0.0],
            drop_ratio_range: [0.0, 0.0],
            rotation: RotationConfig {
                enabled: false,
                max_yaw: 0.0,
            },
            scale_range: [1.0, 1.0],
            flip_prob: [0.0, 0.0],
            noise_points: 0,
            scanmix: ScanMixConfig {
                enabled: false,
                num_sectors: 4,
            },
        }
    }

    /// Preset boxes with conservative subsidiary transforms. `None` is the
    /// identity.
    pub fn preset(p: AugmentPreset) -> Self {
        if p == AugmentPreset::None {
            return Self::identity();
        }
        let (drop, jitter) = p.ranges();
        AugmentConfig {
            preset: Some(p),
            jitter_std_range: jitter,
            drop_ratio_range: drop,
            rotation: RotationConfig {
                enabled: true,
                max_yaw: PI / 12.0,
            },
            scale_range: [0.95, 1.05],
            flip_prob: [0.5, 0.5],
            noise_points: 8,
            scanmix: ScanMixConfig {
                enabled: false,
                num_sectors: 4,
            },
        }
    }

    /// Drop and jitter boxes after preset override.
    pub fn effective_ranges(&self) -> ([f64; 2], [f64; 2]) {
        match self.preset {
            Some(p) => p.ranges(),
            None => (self.drop_ratio_range, self.jitter_std_range),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ([d0, d1], [j0, j1]) = self.effective_ranges();
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 <= d0 && d0 <= d1 && d1 < 1.0) {
            return bad(format!("drop ratio range [{d0}, {d1}] must satisfy 0 <= min <= max < 1"));
        }
        if !(0.0 <= j0 && j0 <= j1 && j1.is_finite()) {
            return bad(format!("jitter std range [{j0}, {j1}] must satisfy 0 <= min <= max"));
        }
        let [s0, s1] = self.scale_range;
        if !(0.0 < s0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("scale range [{s0}, {s1}] must be positive and ordered"));
        }
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("flip probabilities must lie in [0, 1]".into());
        }
        if !(self.rotation.max_yaw >= 0.0 && self.rotation.max_yaw.is_finite()) {
            return bad("max yaw must be finite and non-negative".into());
        }
        if self.scanmix.enabled && self.scanmix.num_sectors < 2 {
            return bad("scan mix needs at least two sectors".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRecord {
    pub partner: String,
    pub num_sectors: usize,
    /// Sectors with this parity come from the parent; the rest from the partner.
    pub parent_parity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRecord {
    pub parent: String,
    pub jitter_std: f64,
    pub drop_ratio: f64,
    pub yaw: f64,
    pub scale: f64,
    pub flip: [bool; 2],
    pub noise_points: usize,
    pub mix: Option<MixRecord>,
    pub key: RngKey,
}

impl AugmentRecord {
    /// Record of the identity transform.
    pub fn neutral(parent: &str, key: RngKey) -> Self {
        AugmentRecord {
            parent: parent.to_string(),
            jitter_std: 0.0,
            drop_ratio: 0.0,
            yaw: 0.0,
            scale: 1.0,
            flip: [false, false],
            noise_points: 0,
            mix: None,
            key,
        }
    }

    pub fn is_neutral(&self) -> bool {
        self.jitter_std == 0.0
            && self.drop_ratio == 0.0
            && self.yaw == 0.0
            && self.scale == 1.0
            && self.flip == [false, false]
            && self.noise_points == 0
            && self.mix.is_none()
    }
}

/// Where an augmented point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Parent(usize),
    Partner(usize),
    Noise,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub cloud: PointCloud,
    pub record: AugmentRecord,
    pub origin: Vec<Origin>,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws every magnitude for one augmentation from `key`. Partner selection
/// for scan mix is left to the caller.
pub fn sample_magnitudes(cfg: &AugmentConfig, parent: &str, key: RngKey) -> AugmentRecord {
    let (drop, jitter) = cfg.effective_ranges();
    let mut rng = key.derive_tag("magnitudes").stream();
    let jitter_std = uniform(&mut rng, jitter);
    let drop_ratio = uniform(&mut rng, drop);
    let yaw = if cfg.rotation.enabled && cfg.rotation.max_yaw > 0.0 {
        uniform(&mut rng, [-cfg.rotation.max_yaw, cfg.rotation.max_yaw])
    } else {
        0.0
    };
    let scale = uniform(&mut rng, cfg.scale_range);
    let flip = [
        rng.random::<f64>() < cfg.flip_prob[0],
        rng.random::<f64>() < cfg.flip_prob[1],
    ];
    AugmentRecord {
        parent: parent.to_string(),
        jitter_std,
        drop_ratio,
        yaw,
        scale,
        flip,
        noise_points: cfg.noise_points,
        mix: None,
        key,
    }
}

/// Independent Gaussian offsets on every coordinate.
pub fn jitter(cloud: &PointCloud, std: f64, key: RngKey) -> Result<PointCloud> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!("jitter std must be finite and >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, std).expect("std validated");
    let mut rng = key.stream();
    let positions = cloud
        .positions()
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in q.iter_mut() {
                *c += normal.sample(&mut rng);
            }
            q
        })
        .collect();
    PointCloud::new(positions, cloud.labels().to_vec(), cloud.meta().clone())
}

/// Survivor indices of an exact-count drop, ascending.
pub fn drop_indices(n: usize, ratio: f64, key: RngKey) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("drop ratio must be in [0, 1), got {ratio}")));
    }
    let removed = (n as f64 * ratio).round() as usize;
    if removed == 0 {
        return Ok((0..n).collect());
    }
    let keep = n - removed;
    let mut rng = key.stream();
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        slots.swap(i, j);
    }
    slots.truncate(keep);
    slots.sort_unstable();
    Ok(slots)
}

pub fn point_drop(cloud: &PointCloud, ratio: f64, key: RngKey) -> Result<PointCloud> {
    Ok(cloud.select(&drop_indices(cloud.len(), ratio, key)?))
}

fn bounding_box(points: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

fn rigid(points: &mut [[f64; 3]], rec: &AugmentRecord) {
    if rec.yaw != 0.0 {
        let (s, c) = rec.yaw.sin_cos();
        for p in points.iter_mut() {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        }
    }
    if rec.scale != 1.0 {
        for p in points.iter_mut() {
            for c in p.iter_mut() {
                *c *= rec.scale;
            }
        }
    }
    for (axis, &on) in rec.flip.iter().enumerate() {
        if on {
            for p in points.iter_mut() {
                p[axis] = -p[axis];
            }
        }
    }
}

/// Rotation, scale, flips, appended noise points, then scan mix, in that
/// order. Returns the cloud and per-point origins.
pub fn subsidiary(
    cloud: &PointCloud,
    rec: &AugmentRecord,
    partner: Option<&PointCloud>,
) -> Result<(PointCloud, Vec<Origin>)> {
    let mut positions = cloud.positions().to_vec();
    let mut labels = cloud.labels().to_vec();
    let mut origin: Vec<Origin> = (0..cloud.len()).map(Origin::Parent).collect();
    rigid(&mut positions, rec);

    if rec.noise_points > 0 && !positions.is_empty() {
        let (lo, hi) = bounding_box(&positions);
        let mut rng = rec.key.derive_tag("noise").stream();
        for _ in 0..rec.noise_points {
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = uniform(&mut rng, [lo[a], hi[a]]);
            }
            positions.push(p);
            labels.push(IGNORE);
            origin.push(Origin::Noise);
        }
    }

    let mut meta = CloudMeta::new(cloud.id(), Source::Augmented);
    meta.parent = Some(cloud.id().to_string());
    meta.labels_unified = cloud.meta().labels_unified;

    let Some(mix) = &rec.mix else {
        return Ok((PointCloud::new(positions, labels, meta)?, origin));
    };
    let partner = match partner {
        Some(p) if p.id() == mix.partner => p,
        Some(p) => {
            return Err(Error::invalid(format!(
                "scan mix record names partner `{}` but `{}` was supplied",
                mix.partner,
                p.id()
            )))
        }
        None => return Err(Error::invalid("scan mix enabled without a partner cloud")),
    };
    let own = PointCloud::new(positions, labels, meta.clone())?;
    let own_sector = sector_split(&own, mix.num_sectors);
    let mut partner_pos = partner.positions().to_vec();
    rigid(&mut partner_pos, rec);
    let partner_t = PointCloud::new(partner_pos, partner.labels().to_vec(), meta.clone())?;
    let partner_sector = sector_split(&partner_t, mix.num_sectors);

    let (own_pos, own_lab, _) = own.into_parts();
    let mut out_pos = Vec::new();
    let mut out_lab = Vec::new();
    let mut out_origin = Vec::new();
    for i in 0..own_pos.len() {
        if own_sector[i] % 2 == mix.parent_parity {
            out_pos.push(own_pos[i]);
            out_lab.push(own_lab[i]);
            out_origin.push(origin[i]);
        }
    }
    for (i, p) in partner_t.positions().iter().enumerate() {
        if partner_sector[i] % 2 != mix.parent_parity {
            out_pos.push(*p);
            out_lab.push(partner_t.labels()[i]);
            out_origin.push(Origin::Partner(i));
        }
    }
    Ok((PointCloud::new(out_pos, out_lab, meta)?, out_origin))
}

/// Applies a record: subsidiary, then drop, then jitter.
pub fn replay(cloud: &PointCloud, rec: &AugmentRecord, partner: Option<&PointCloud>) -> Result<Augmented> {
    if rec.parent != cloud.id() {
        return Err(Error::invalid(format!(
            "record parent `{}` does not match cloud `{}`",
            rec.parent,
            cloud.id()
        )));
    }
    let (sub, origin) = subsidiary(cloud, rec, partner)?;
    let keep = drop_indices(sub.len(), rec.drop_ratio, rec.key.derive_tag("drop"))?;
    let dropped = sub.select(&keep);
    let origin = keep.iter().map(|&i| origin[i]).collect();
    let out = jitter(&dropped, rec.jitter_std, rec.key.derive_tag("jitter"))?;
    Ok(Augmented {
        cloud: out,
        record: rec.clone(),
        origin,
    })
}

/// Samples magnitudes from `cfg` and applies them. `partner` is required
/// when scan mix is enabled.
pub fn augment_pair(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    key: RngKey,
    partner: Option<&PointCloud>,
) -> Result<Augmented> {
    cfg.validate()?;
    let mut rec = sample_magnitudes(cfg, cloud.id(), key);
    if cfg.scanmix.enabled {
        let p = partner.ok_or_else(|| Error::invalid("scan mix enabled without a partner cloud"))?;
        let parity = key.derive_tag("mix").stream().random_range(0..2usize);
        rec.mix = Some(MixRecord {
            partner: p.id().to_string(),
            num_sectors: cfg.scanmix.num_sectors,
            parent_parity: parity,
        });
    }
    replay(cloud, &rec, partner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::pointcloud::testutil::{cloud, random_points};
    use proptest::prelude::*;
    use rand::Rng;

    fn labeled(n: usize, seed: u64) -> PointCloud {
        let pts = random_points(n, seed, 10.0);
        let labels = (0..n).map(|i| (i % 7) as u16).collect();
        PointCloud::new(pts, labels, CloudMeta::new("a", Source::Synthetic)).unwrap()
    }

    #[test]
    fn degenerate_uniform() {
        let mut cfg = AugmentConfig::identity();
        cfg.preset = None;
        cfg.jitter_std_range = [0.03, 0.03];
        for s in 0..20 {
            assert_eq!(sample_magnitudes(&cfg, "a", RngKey::new(s)).jitter_std, 0.03);
        }
    }

    #[test]
    fn random_preset_is_eas_box() {
        assert_eq!(AugmentPreset::Random.ranges(), ([0.2, 0.8], [0.01, 0.05]));
        assert_eq!(AugmentPreset::Excessive.ranges(), ([0.0, 0.99], [0.0, 0.10]));
    }

    #[test]
    fn mean_drop_ratio() {
        let cfg = AugmentConfig::preset(AugmentPreset::Random);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| sample_magnitudes(&cfg, "a", RngKey::new(1).derive(i)).drop_ratio)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn jitter_zero_identity_and_variance() {
        let c = labeled(50, 1);
        let same = jitter(&c, 0.0, RngKey::new(0)).unwrap();
        assert_eq!(same.positions(), c.positions());

        let base = cloud(vec![[0.0; 3]; 33_334]);
        let out = jitter(&base, 0.2, RngKey::new(9)).unwrap();
        let offs: Vec<f64> = out.positions().iter().flatten().copied().collect();
        let m = offs.iter().sum::<f64>() / offs.len() as f64;
        let var = offs.iter().map(|o| (o - m) * (o - m)).sum::<f64>() / (offs.len() - 1) as f64;
        assert!((var / 0.04 - 1.0).abs() < 0.02, "{var}");
        assert_eq!(out.labels(), base.labels());
    }

    #[test]
    fn drop_exact_count() {
        let c = labeled(10, 2);
        assert_eq!(point_drop(&c, 0.0, RngKey::new(0)).unwrap().positions(), c.positions());
        assert_eq!(point_drop(&c, 0.2, RngKey::new(0)).unwrap().len(), 8);
        assert!(point_drop(&c, 1.0, RngKey::new(0)).is_err());
    }

    #[test]
    fn drop_matches_fisher_yates_oracle() {
        for seed in 0..20 {
            let key = RngKey::new(seed);
            let got = drop_indices(97, 0.37, key).unwrap();
            let mut rng = key.stream();
            let keep = 97 - (97.0f64 * 0.37).round() as usize;
            let want = oracle::drop_survivors(97, keep, |i| rng.random_range(0..=i));
            assert_eq!(got, want);
        }
    }

    #[test]
    fn full_turn_is_identity() {
        let c = labeled(40, 3);
        let mut rec = AugmentRecord::neutral("a", RngKey::new(0));
        rec.yaw = std::f64::consts::TAU;
        let (out, _) = subsidiary(&c, &rec, None).unwrap();
        for (p, q) in out.positions().iter().zip(c.positions()) {
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn neutral_subsidiary_identity() {
        let c = labeled(40, 3);
        let (out, _) = subsidiary(&c, &AugmentRecord::neutral("a", RngKey::new(0)), None).unwrap();
        assert_eq!(out.positions(), c.positions());
        assert_eq!(out.labels(), c.labels());
    }

    #[test]
    fn noise_points_are_ignored_label() {
        let c = labeled(40, 3);
        let mut rec = AugmentRecord::neutral("a", RngKey::new(0));
        rec.noise_points = 5;
        let (out, origin) = subsidiary(&c, &rec, None).unwrap();
        assert_eq!(out.len(), 45);
        assert!(out.labels()[40..].iter().all(|&l| l == IGNORE));
        assert!(origin[40..].iter().all(|o| *o == Origin::Noise));
    }

    #[test]
    fn four_sector_mix() {
        let a = labeled(400, 4);
        let mut b = labeled(300, 5);
        b.meta_mut().cloud_id = "b".into();
        let mut rec = AugmentRecord::neutral("a", RngKey::new(0));
        rec.mix = Some(MixRecord {
            partner: "b".into(),
            num_sectors: 4,
            parent_parity: 0,
        });
        let (out, origin) = subsidiary(&a, &rec, Some(&b)).unwrap();
        let mut want_a = Vec::new();
        for (i, p) in a.positions().iter().enumerate() {
            if [0, 2].contains(&oracle::angle_sector(p[0], p[1], 4)) {
                want_a.push(Origin::Parent(i));
            }
        }
        let mut want_b = Vec::new();
        for (i, p) in b.positions().iter().enumerate() {
            if [1, 3].contains(&oracle::angle_sector(p[0], p[1], 4)) {
                want_b.push(Origin::Partner(i));
            }
        }
        want_a.extend(want_b);
        assert_eq!(origin, want_a);
        for (k, o) in origin.iter().enumerate() {
            let lab = match o {
                Origin::Parent(i) => a.labels()[*i],
                Origin::Partner(i) => b.labels()[*i],
                Origin::Noise => IGNORE,
            };
            assert_eq!(out.labels()[k], lab);
        }
        assert!(subsidiary(&a, &rec, None).is_err());
    }

    #[test]
    fn preset_none_is_identity() {
        let c = labeled(60, 6);
        let out = augment_pair(&c, &AugmentConfig::preset(AugmentPreset::None), RngKey::new(3), None).unwrap();
        assert!(out.record.is_neutral());
        assert_eq!(out.cloud.positions(), c.positions());
        assert_eq!(out.cloud.labels(), c.labels());
    }

    #[test]
    fn replay_is_byte_exact() {
        let c = labeled(200, 7);
        let mut b = labeled(150, 8);
        b.meta_mut().cloud_id = "b".into();
        let mut cfg = AugmentConfig::preset(AugmentPreset::Heavy);
        cfg.scanmix.enabled = true;
        let out = augment_pair(&c, &cfg, RngKey::new(11), Some(&b)).unwrap();
        let json = serde_json::to_string(&out.record).unwrap();
        let rec: AugmentRecord = serde_json::from_str(&json).unwrap();
        let again = replay(&c, &rec, Some(&b)).unwrap();
        let bits = |c: &PointCloud| c.positions().iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&again.cloud), bits(&out.cloud));
        assert_eq!(again.cloud.labels(), out.cloud.labels());
    }

    #[test]
    fn heavy_draws_inside_box() {
        let cfg = AugmentConfig::preset(AugmentPreset::Heavy);
        for i in 0..1000 {
            let r = sample_magnitudes(&cfg, "a", RngKey::new(2).derive(i));
            assert!((0.5..=0.8).contains(&r.drop_ratio));
            assert!((0.03..=0.05).contains(&r.jitter_std));
        }
    }

    #[test]
    fn named_levels_increase() {
        let mid = |r: [f64; 2]| (r[0] + r[1]) / 2.0;
        let levels = [AugmentPreset::Light, AugmentPreset::Moderate, AugmentPreset::Heavy, AugmentPreset::Excessive];
        for w in levels.windows(2) {
            assert!(mid(w[0].ranges().1) < mid(w[1].ranges().1));
        }
        for w in levels[..3].windows(2) {
            assert!(mid(w[0].ranges().0) < mid(w[1].ranges().0));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = AugmentConfig::identity();
        cfg.preset = None;
        cfg.drop_ratio_range = [0.5, 1.0];
        assert!(cfg.validate().is_err());
        cfg.drop_ratio_range = [0.6, 0.5];
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn labels_follow_points(seed in 0u64..500, n in 20usize..120) {
            let c = labeled(n, seed);
            let out = augment_pair(&c, &AugmentConfig::preset(AugmentPreset::Random), RngKey::new(seed), None).unwrap();
            prop_assert_eq!(out.origin.len(), out.cloud.len());
            for (k, o) in out.origin.iter().enumerate() {
                match o {
                    Origin::Parent(i) => prop_assert_eq!(out.cloud.labels()[k], c.labels()[*i]),
                    Origin::Noise => prop_assert_eq!(out.cloud.labels()[k], IGNORE),
                    Origin::Partner(_) => prop_assert!(false),
                }
            }
        }

        #[test]
        fn deterministic(seed in 0u64..500) {
            let c = labeled(64, seed);
            let cfg = AugmentConfig::preset(AugmentPreset::Excessive);
            let a = augment_pair(&c, &cfg, RngKey::new(seed), None).unwrap();
            let b = augment_pair(&c, &cfg, RngKey::new(seed), None).unwrap();
            prop_assert_eq!(a.cloud, b.cloud);
        }
    }
}
