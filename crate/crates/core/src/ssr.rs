//! Semantic shift region localization against a frozen prior snapshot.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pointcloud::{dilate_mask, PointCloud, IGNORE};
use crate::scp::{build_encoder_input, encode_frozen, CodebookState, EncoderInput, PriorAutoencoder};
use crate::{ParamSet, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 3.0;
pub const DEFAULT_DILATION_RADIUS: f64 = 0.5;

/// Frozen copy of the encoder, codes and variances used for one SSR pass.
#[derive(Debug, Clone)]
pub struct PriorSnapshot {
    encoder: ParamSet,
    class_count: usize,
    codes_per_class: usize,
    latent_dim: usize,
    codes: Vec<f64>,
    variances: Vec<f64>,
    initialized: Vec<bool>,
    threshold: f64,
}

impl PriorSnapshot {
    pub fn capture(ae: &PriorAutoencoder, cb: &CodebookState, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
        }
        Ok(PriorSnapshot {
            encoder: ae.encoder_params(),
            class_count: cb.class_count,
            codes_per_class: cb.codes_per_class,
            latent_dim: cb.latent_dim,
            codes: cb.table().to_vec(),
            variances: cb.variances.clone(),
            initialized: cb.initialized.clone(),
            threshold,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Same statistics, different threshold.
    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
        }
        Ok(PriorSnapshot {
            threshold,
            ..self.clone()
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn encoder(&self) -> &ParamSet {
        &self.encoder
    }

    pub fn code(&self, global: usize) -> &[f64] {
        &self.codes[global * self.latent_dim..(global + 1) * self.latent_dim]
    }

    pub fn num_codes(&self) -> usize {
        self.class_count * self.codes_per_class
    }

    pub fn codes_per_class(&self) -> usize {
        self.codes_per_class
    }

    pub fn is_class_ready(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder.fingerprint().as_bytes());
        for v in self.codes.iter().chain(&self.variances) {
            h.update(v.to_le_bytes());
        }
        h.update(self.threshold.to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Normalized diagonal-Mahalanobis distance to the nearest same-class code:
/// `sqrt(Σ (z - e)² / σ²) / sqrt(D)`. Returns the score and the class-local
/// code index.
pub fn shift_score(snap: &PriorSnapshot, z: &[f64], class: usize) -> (f64, usize) {
    let d = snap.latent_dim;
    let k = snap.codes_per_class;
    let mut best = (f64::INFINITY, 0);
    for j in 0..k {
        let e = snap.code(class * k + j);
        let dist: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.0 {
            best = (dist, j);
        }
    }
    let g = class * k + best.1;
    let e = snap.code(g);
    let var = &snap.variances[g * d..(g + 1) * d];
    let m: f64 = z
        .iter()
        .zip(e)
        .zip(var)
        .map(|((a, b), v)| (a - b) * (a - b) / v)
        .sum();
    ((m / d as f64).sqrt(), best.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftMasks {
    pub cloud_id: String,
    pub scr: Vec<bool>,
    pub ssr: Vec<bool>,
    /// Zero for unlabeled rows and for classes the prior has not seen yet.
    pub score: Vec<f64>,
    /// `(class, class-local index)` of the nearest same-class code.
    pub code: Vec<Option<(usize, usize)>>,
}

impl ShiftMasks {
    pub fn labeled(&self) -> impl Iterator<Item = bool> + '_ {
        self.scr.iter().zip(&self.ssr).map(|(a, b)| a | b)
    }

    pub fn to_json(&self) -> MasksJson {
        MasksJson {
            cloud_id: self.cloud_id.clone(),
            ssr: self.ssr.iter().map(|&b| if b { '1' } else { '0' }).collect(),
            scores: self.score.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasksJson {
    pub cloud_id: String,
    pub ssr: String,
    pub scores: Vec<f64>,
}

/// Full output of a localization pass: the masks plus the encoder input and
/// latents they were computed from.
#[derive(Debug, Clone)]
pub struct Localization {
    pub masks: ShiftMasks,
    pub input: EncoderInput,
    /// Row (in the caller's order) of each encoder input row, before grouping.
    pub rows: Vec<usize>,
    /// Frozen-encoder latents in grouped order.
    pub z_e: Tensor,
}

/// Scores every labeled row of an augmented prediction against `snap`,
/// thresholds, dilates the SSR set over `cloud` and takes the complement on
/// labeled rows. `cloud` holds one point per row.
pub fn localize_detailed(
    snap: &PriorSnapshot,
    probs: &[f64],
    labels: &[u16],
    cloud: &PointCloud,
    dilation_radius: f64,
) -> Result<Localization> {
    let n = labels.len();
    let c = snap.class_count;
    if cloud.len() != n || probs.len() != n * c {
        return Err(Error::Shape {
            op: "localize",
            lhs: vec![probs.len() / c.max(1), c],
            rhs: vec![cloud.len(), n],
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| labels[i] != IGNORE).collect();
    let sub_probs: Vec<f64> = rows.iter().flat_map(|&i| probs[i * c..(i + 1) * c].iter().copied()).collect();
    let sub_coords: Vec<[f64; 3]> = rows.iter().map(|&i| cloud.positions()[i]).collect();
    let sub_labels: Vec<u16> = rows.iter().map(|&i| labels[i]).collect();
    let input = build_encoder_input(&sub_probs, c, &sub_coords, &sub_labels)?;
    let z_e = encode_frozen(&snap.encoder, &input.rows(), c)?;

    let d = snap.latent_dim;
    let mut raw = vec![false; n];
    let mut score = vec![0.0; n];
    let mut code = vec![None; n];
    for (g, &local) in input.perm.iter().enumerate() {
        let row = rows[local];
        let class = input.classes[g];
        if !snap.initialized[class] {
            continue;
        }
        let (s, j) = shift_score(snap, &z_e.values()[g * d..(g + 1) * d], class);
        score[row] = s;
        code[row] = Some((class, j));
        raw[row] = s > snap.threshold;
    }
    let dilated = dilate_mask(cloud, &raw, dilation_radius);
    let labeled: Vec<bool> = labels.iter().map(|&l| l != IGNORE).collect();
    let ssr: Vec<bool> = dilated.iter().zip(&labeled).map(|(&s, &l)| s && l).collect();
    let scr: Vec<bool> = ssr.iter().zip(&labeled).map(|(&s, &l)| !s && l).collect();
    Ok(Localization {
        masks: ShiftMasks {
            cloud_id: cloud.id().to_string(),
            scr,
            ssr,
            score,
            code,
        },
        input,
        rows,
        z_e,
    })
}

pub fn localize(
    snap: &PriorSnapshot,
    probs: &[f64],
    labels: &[u16],
    cloud: &PointCloud,
    dilation_radius: f64,
) -> Result<ShiftMasks> {
    localize_detailed(snap, probs, labels, cloud, dilation_radius).map(|l| l.masks)
}

/// Fraction of labeled rows flagged as shifted; 0 with no labeled rows.
pub fn ssr_ratio(masks: &ShiftMasks) -> f64 {
    let labeled = masks.labeled().filter(|&b| b).count();
    if labeled == 0 {
        return 0.0;
    }
    masks.ssr.iter().filter(|&&b| b).count() as f64 / labeled as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::pointcloud::{CloudMeta, Source};
    use crate::rng::RngKey;
    use crate::scp::{PriorKind, COORD_SCALE};
    use proptest::prelude::*;
    use rand::Rng;

    fn masks(scr: Vec<bool>, ssr: Vec<bool>) -> ShiftMasks {
        let n = scr.len();
        ShiftMasks {
            cloud_id: "m".into(),
            scr,
            ssr,
            score: vec![0.0; n],
            code: vec![None; n],
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(ssr_ratio(&masks(vec![true; 4], vec![false; 4])), 0.0);
        assert_eq!(ssr_ratio(&masks(vec![false; 4], vec![true; 4])), 1.0);
        assert_eq!(ssr_ratio(&masks(vec![true, false, true, false], vec![false, true, false, true])), 0.5);
        assert_eq!(ssr_ratio(&masks(vec![false; 2], vec![false; 2])), 0.0);
    }

    fn snapshot(d: usize, var: f64) -> PriorSnapshot {
        PriorSnapshot {
            encoder: ParamSet::new(),
            class_count: 1,
            codes_per_class: 1,
            latent_dim: d,
            codes: vec![0.0; d],
            variances: vec![var; d],
            initialized: vec![true],
            threshold: 3.0,
        }
    }

    #[test]
    fn score_examples() {
        let s = snapshot(1, 1.0);
        assert_eq!(shift_score(&s, &[0.0], 0), (0.0, 0));
        assert_eq!(shift_score(&s, &[4.0], 0), (4.0, 0));
        // isotropic: one sigma in every channel scores 1
        let s = snapshot(16, 0.25);
        assert!((shift_score(&s, &[0.5; 16], 0).0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scores_match_extended_precision() {
        let d = 8;
        let mut rng = RngKey::new(1).stream();
        let mut s = snapshot(d, 1.0);
        s.codes_per_class = 3;
        s.codes = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.variances = (0..3 * d).map(|_| rng.random_range(0.01..2.0)).collect();
        for _ in 0..200 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (score, j) = shift_score(&s, &z, 0);
            let (idx, _) = oracle::brute_nn(&s.codes, d, &z, None);
            assert_eq!(j, idx[0]);
            let e = &s.codes[j * d..(j + 1) * d];
            let v = &s.variances[j * d..(j + 1) * d];
            let m = oracle::ksum((0..d).map(|c| (z[c] - e[c]) * (z[c] - e[c]) / v[c]));
            let want = (m / d as f64).sqrt();
            assert!((score - want).abs() <= 1e-10 * want.max(1.0));
        }
    }

    /// Identity encoder on a 2-class, D = 5 prior, so latents are the scaled
    /// inputs themselves.
    fn identity_prior() -> (PriorAutoencoder, CodebookState) {
        let mut ae = PriorAutoencoder::new(PriorKind::Prototype, 2, 5, RngKey::new(0));
        let w = ae.params.tensor_mut(0).values_mut();
        w.fill(0.0);
        for i in 0..5 {
            w[i * 5 + i] = 1.0;
        }
        let cb = CodebookState::new(2, 1, 5);
        (ae, cb)
    }

    fn row_cloud(coords: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(coords.to_vec(), vec![0; coords.len()], CloudMeta::new("rows", Source::Augmented)).unwrap()
    }

    fn latent(p: &[f64; 2], x: &[f64; 3]) -> Vec<f64> {
        vec![p[0], p[1], x[0] * COORD_SCALE, x[1] * COORD_SCALE, x[2] * COORD_SCALE]
    }

    fn setup(outlier: bool) -> (PriorSnapshot, Vec<f64>, Vec<u16>, PointCloud) {
        let (ae, mut cb) = identity_prior();
        let coords: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        let probs_rows = [[0.9, 0.1]; 6];
        let labels = vec![0, 0, 0, 1, 1, 255];
        // every latent of the class sits on its code: use a per-class code at row 0
        let c0 = latent(&probs_rows[0], &coords[0]);
        let c1 = latent(&probs_rows[3], &coords[3]);
        cb.table_mut()[..5].copy_from_slice(&c0);
        cb.table_mut()[5..].copy_from_slice(&c1);
        cb.initialized = vec![true, true];
        cb.variances.fill(1e-4);
        let mut probs: Vec<f64> = probs_rows.iter().flatten().copied().collect();
        if outlier {
            probs[2] = 0.0;
            probs[3] = 1.0;
        }
        let snap = PriorSnapshot::capture(&ae, &cb, 3.0).unwrap();
        // rows 1, 2 and 4 differ from their code by coordinate offsets only;
        // put them on the code exactly by stacking points
        let coords: Vec<[f64; 3]> = vec![coords[0], coords[0], coords[0], coords[3], coords[3], coords[5]];
        (snap, probs, labels, row_cloud(&coords))
    }

    #[test]
    fn on_code_latents_are_consistent() {
        let (snap, probs, labels, cloud) = setup(false);
        let m = localize(&snap, &probs, &labels, &cloud, 0.0).unwrap();
        assert_eq!(m.ssr, vec![false; 6]);
        assert_eq!(m.scr, vec![true, true, true, true, true, false]);
    }

    #[test]
    fn one_outlier_without_dilation() {
        let (snap, probs, labels, cloud) = setup(true);
        let m = localize(&snap, &probs, &labels, &cloud, 0.0).unwrap();
        assert_eq!(m.ssr.iter().filter(|&&b| b).count(), 1);
        assert!(m.ssr[1]);
    }

    #[test]
    fn huge_dilation_floods_labeled_rows() {
        let (snap, probs, labels, cloud) = setup(true);
        let m = localize(&snap, &probs, &labels, &cloud, cloud.diameter_bound() + 1.0).unwrap();
        assert_eq!(m.ssr, vec![true, true, true, true, true, false]);
        assert!(m.scr.iter().all(|&b| !b));
    }

    #[test]
    fn snapshot_is_independent_of_later_updates() {
        let (ae, mut cb) = identity_prior();
        cb.initialized = vec![true, true];
        let snap = PriorSnapshot::capture(&ae, &cb, 3.0).unwrap();
        let before = snap.fingerprint();
        cb.variances.fill(7.0);
        cb.table_mut().fill(1.0);
        assert_eq!(snap.fingerprint(), before);
        assert!(PriorSnapshot::capture(&ae, &cb, 0.0).is_err());
    }

    fn random_case(seed: u64) -> (PriorSnapshot, Vec<f64>, Vec<u16>, PointCloud) {
        let mut rng = RngKey::new(seed).stream();
        let c = 3;
        let ae = PriorAutoencoder::with_hidden(PriorKind::Vqvae, c, 6, &[8], RngKey::new(seed));
        let mut cb = CodebookState::new(c, 4, 6);
        let n = 60;
        let mut probs = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let coords: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-3.0..3.0))).collect();
        let labels: Vec<u16> = (0..n).map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..c as u16) }).collect();
        let keep: Vec<usize> = (0..n).filter(|&i| labels[i] != 255).collect();
        let inp = build_encoder_input(
            &keep.iter().flat_map(|&i| probs[i * c..(i + 1) * c].to_vec()).collect::<Vec<_>>(),
            c,
            &keep.iter().map(|&i| coords[i]).collect::<Vec<_>>(),
            &keep.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        )
        .unwrap();
        let z = ae.encode_values(&inp.rows()).unwrap();
        cb.initialize_classes(z.values(), &inp.classes, RngKey::new(seed + 1));
        cb.variances.iter_mut().for_each(|v| *v = rng.random_range(1e-4..1e-2));
        let snap = PriorSnapshot::capture(&ae, &cb, 3.0).unwrap();
        (snap, probs, labels, row_cloud(&coords))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn complement_dilation_and_threshold(seed in 0u64..10_000, radius in 0.0f64..2.0) {
            let (snap, probs, labels, cloud) = random_case(seed);
            let base = localize(&snap, &probs, &labels, &cloud, 0.0).unwrap();
            let dil = localize(&snap, &probs, &labels, &cloud, radius).unwrap();
            for m in [&base, &dil] {
                for i in 0..labels.len() {
                    if labels[i] == 255 {
                        prop_assert!(!m.scr[i] && !m.ssr[i]);
                    } else {
                        prop_assert!(m.scr[i] != m.ssr[i]);
                    }
                    prop_assert!(m.score[i] >= 0.0 && m.score[i].is_finite());
                }
            }
            for i in 0..labels.len() {
                prop_assert!(!base.ssr[i] || dil.ssr[i]);
            }
            let mut prev = base.ssr.clone();
            for t in [2.0, 3.0, 4.0] {
                let m = localize(&snap.with_threshold(t).unwrap(), &probs, &labels, &cloud, 0.0).unwrap();
                if t > 2.0 {
                    for i in 0..labels.len() {
                        prop_assert!(!m.ssr[i] || prev[i]);
                    }
                }
                prev = m.ssr;
            }
        }

        #[test]
        fn scores_follow_rows_under_permutation(seed in 0u64..10_000) {
            let (snap, probs, labels, cloud) = random_case(seed);
            let n = labels.len();
            let c = snap.class_count();
            let rev: Vec<usize> = (0..n).rev().collect();
            let probs_r: Vec<f64> = rev.iter().flat_map(|&i| probs[i * c..(i + 1) * c].to_vec()).collect();
            let labels_r: Vec<u16> = rev.iter().map(|&i| labels[i]).collect();
            let cloud_r = cloud.select(&rev);
            let a = localize(&snap, &probs, &labels, &cloud, 0.0).unwrap();
            let b = localize(&snap, &probs_r, &labels_r, &cloud_r, 0.0).unwrap();
            for i in 0..n {
                prop_assert_eq!(a.score[i], b.score[n - 1 - i]);
            }
        }
    }

    #[test]
    fn masks_json_shape() {
        let m = masks(vec![true, false], vec![false, true]);
        let j = m.to_json();
        assert_eq!(j.ssr, "01");
        assert_eq!(j.scores.len(), 2);
    }
}
