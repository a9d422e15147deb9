//! Oracle suites: production paths checked against the slow references in
//! [`crate::oracle`] on seeded inputs.

use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig, AugmentPreset};
use crate::dataset::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::eval::{confusion, iou};
use crate::oracle::{self, OracleReport};
use crate::pointcloud::{knn, PointCloud, IGNORE};
use crate::rng::RngKey;
use crate::scp::{quantize, vq_pass, CodebookState, FrozenVq, INIT_VARIANCE, VAR_FLOOR};
use crate::segnet::{ce_loss, prepare, FEATURE_DIM, PointFeatures, Prepared, SegModel};
use crate::ssr::{localize, shift_score, PriorSnapshot};
use crate::trainer::{
    plan_step, seg_objective, seg_objective_value, stage_batch, train_step, BatchItem, TrainConfig, TrainMode,
    TrainState,
};
use crate::Tape;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Quant,
    Stats,
    Metrics,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "grad" => Suite::Grad,
            "quant" => Suite::Quant,
            "stats" => Suite::Stats,
            "metrics" => Suite::Metrics,
            "all" => Suite::All,
            _ => return None,
        })
    }
}

/// Pass thresholds for every suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub grad_rel: f64,
    pub grad_abs: f64,
    pub fd_step: f64,
    pub stats_abs: f64,
    pub metrics_abs: f64,
    pub score_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            grad_rel: 1e-4,
            grad_abs: 1e-8,
            fd_step: 1e-5,
            stats_abs: 1e-12,
            metrics_abs: 1e-12,
            score_rel: 1e-10,
        }
    }
}

pub fn run_suite(suite: Suite, tol: &Tolerances) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        out.extend(grad_suite(tol)?);
    }
    if matches!(suite, Suite::Quant | Suite::All) {
        out.extend(quant_suite(tol)?);
    }
    if matches!(suite, Suite::Stats | Suite::All) {
        out.extend(stats_suite(tol)?);
    }
    if matches!(suite, Suite::Metrics | Suite::All) {
        out.extend(metrics_suite(tol)?);
    }
    Ok(out)
}

/// Four classes, four codes per class, eight latent channels, narrow nets.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Full,
        class_count: 4,
        codes_per_class: 4,
        latent_dim: 8,
        hidden: vec![8, 8],
        prior_hidden: vec![8],
        batch_size: 2,
        epochs: 1,
        ..TrainConfig::default()
    }
}

/// Seeded four-class scenes of `points` points each.
pub fn tiny_scenes(n: usize, points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    (0..n)
        .map(|i| {
            let mut spec = SceneSpec::new(seed + i as u64);
            spec.num_points = points;
            spec.class_count = 4;
            generate_scene(&spec)
        })
        .collect()
}

fn batch_of<'a>(clouds: &'a [PointCloud], prepared: &'a [Prepared], idx: &[usize]) -> Vec<BatchItem<'a>> {
    idx.iter()
        .map(|&i| BatchItem {
            cloud: &clouds[i],
            original: &prepared[i],
        })
        .collect()
}

fn prepare_all(clouds: &[PointCloud], cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    clouds.iter().map(|c| prepare(c, cfg.voxel_size)).collect()
}

/// Tiny-config state after `warmup` ordinary steps over `clouds`.
fn warmed_state(cfg: &TrainConfig, clouds: &[PointCloud], prepared: &[Prepared], warmup: usize) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    for s in 0..warmup {
        let idx = [s % clouds.len(), (s + 1) % clouds.len()];
        train_step(&mut state, &batch_of(clouds, prepared, &idx), cfg)?;
    }
    Ok(state)
}

fn mlp_gradients(tol: &Tolerances) -> Result<OracleReport> {
    let model = SegModel::new(&[6, 5], 3, RngKey::new(11));
    let mut rng = RngKey::new(12).stream();
    let feats = PointFeatures {
        rows: (0..10)
            .map(|_| {
                let mut r: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
                r[FEATURE_DIM - 1] = r[FEATURE_DIM - 1].abs();
                r
            })
            .collect(),
    };
    let labels: Vec<u16> = (0..10).map(|i| [0, 1, 2, IGNORE][i % 4]).collect();
    let loss_of = |m: &SegModel| -> f64 {
        let mut tape = Tape::new();
        let vars = m.params.bind_frozen(&mut tape);
        let logits = m.forward(&mut tape, &vars, &feats).expect("shapes");
        let l = ce_loss(&mut tape, logits, &labels, None).expect("labels");
        tape.scalar(l)
    };
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let logits = model.forward(&mut tape, &vars, &feats)?;
    let l = ce_loss(&mut tape, logits, &labels, None)?;
    let grads = tape.backward(l)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (slot, v) in vars.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*v).expect("leaf gradient"));
        let base = model.params.tensor(slot).values().to_vec();
        numeric.extend(oracle::fd_gradient(
            |p| {
                let mut m = model.clone();
                m.params.tensor_mut(slot).values_mut().copy_from_slice(p);
                loss_of(&m)
            },
            &base,
            tol.fd_step,
        )?);
    }
    Ok(OracleReport::compare("grad.mlp_ce", &analytic, &numeric, tol.grad_rel, tol.grad_abs))
}

/// Gradient of the full segmentation objective and of the VQ objective on
/// the tiny config, with assignments, masks and targets frozen. The SSR
/// threshold is lowered until the distillation term has rows.
pub fn tiny_gradient_checks(tol: &Tolerances) -> Result<Vec<OracleReport>> {
    let mut cfg = tiny_config();
    cfg.threshold = 0.5;
    let clouds = tiny_scenes(2, 64, 40)?;
    let prepared = prepare_all(&clouds, &cfg)?;
    let mut state = warmed_state(&cfg, &clouds, &prepared, 3)?;
    let batch = batch_of(&clouds, &prepared, &[0, 1]);
    let sb = stage_batch(&state, &batch, &cfg)?;
    let lo = state.seg.logits(&sb.feats_orig)?;
    let la = state.seg.logits(sb.feats_aug.as_ref().expect("full mode augments"))?;
    let mut plan = plan_step(&mut state, &sb, &lo, Some(&la), &cfg)?;
    let mut t = cfg.threshold;
    while plan.ssr_rows == Some(0) && t > 1e-6 {
        t *= 0.25;
        cfg.threshold = t;
        let mut probe = state.clone();
        plan = plan_step(&mut probe, &sb, &lo, Some(&la), &cfg)?;
    }
    let targets = &plan.targets;
    if targets.distill.as_ref().is_none_or(|d| d.rows.is_empty()) {
        return Err(Error::invalid("gradient check could not produce distillation rows"));
    }

    let fa = sb.feats_aug.as_ref().expect("augmented");
    let mut tape = Tape::new();
    let vars = state.seg.params.bind(&mut tape);
    let lo_v = state.seg.forward(&mut tape, &vars, &sb.feats_orig)?;
    let la_v = state.seg.forward(&mut tape, &vars, fa)?;
    let loss = seg_objective(&mut tape, lo_v, Some(la_v), targets)?;
    let grads = tape.backward(loss.total)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (slot, v) in vars.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*v).expect("leaf gradient"));
        let base = state.seg.params.tensor(slot).values().to_vec();
        let seg = state.seg.clone();
        numeric.extend(oracle::fd_gradient(
            |p| {
                let mut m = seg.clone();
                m.params.tensor_mut(slot).values_mut().copy_from_slice(p);
                seg_objective_value(&m, &sb.feats_orig, Some(fa), targets).unwrap_or(f64::NAN)
            },
            &base,
            tol.fd_step,
        )?);
    }
    let seg_report = OracleReport::compare("grad.seg_objective", &analytic, &numeric, tol.grad_rel, tol.grad_abs);

    // VQ objective on this step's encoder input
    let input = plan.prior_input.as_ref().expect("full mode learns the prior");
    let ae = state.ae.clone();
    let cb = state.codebook.clone();
    let mut tape = Tape::new();
    let av = ae.params.bind(&mut tape);
    let cv = cb.codes.bind(&mut tape)[0];
    let pass = vq_pass(&mut tape, &ae, &av, cv, &cb, input, None)?;
    let frozen = FrozenVq::capture(&ae, &cb, input, &pass.quant)?;
    let grads = tape.backward(pass.losses.total)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (slot, v) in av.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*v).expect("leaf gradient"));
        let base = ae.params.tensor(slot).values().to_vec();
        numeric.extend(oracle::fd_gradient(
            |p| {
                let mut m = ae.clone();
                m.params.tensor_mut(slot).values_mut().copy_from_slice(p);
                crate::scp::vq_surrogate_value(&m, &cb, input, &pass.quant, &frozen).unwrap_or(f64::NAN)
            },
            &base,
            tol.fd_step,
        )?);
    }
    analytic.extend_from_slice(grads.get(cv).unwrap_or(&vec![0.0; cb.table().len()]));
    numeric.extend(oracle::fd_gradient(
        |p| {
            let mut c = cb.clone();
            c.table_mut().copy_from_slice(p);
            crate::scp::vq_surrogate_value(&ae, &c, input, &pass.quant, &frozen).unwrap_or(f64::NAN)
        },
        cb.table(),
        tol.fd_step,
    )?);
    let vq_report = OracleReport::compare("grad.vq_objective", &analytic, &numeric, tol.grad_rel, tol.grad_abs);
    Ok(vec![seg_report, vq_report])
}

pub fn grad_suite(tol: &Tolerances) -> Result<Vec<OracleReport>> {
    let mut out = vec![mlp_gradients(tol)?];
    out.extend(tiny_gradient_checks(tol)?);
    Ok(out)
}

/// Random `C·k × D` codebook where some codes are exact duplicates of an
/// earlier code in the same class, plus queries, a third of which sit exactly
/// on a duplicated code.
pub fn tie_codebook(classes: usize, k: usize, d: usize, queries: usize, key: RngKey) -> (CodebookState, Vec<f64>, Vec<usize>) {
    let mut rng = key.stream();
    let mut cb = CodebookState::new(classes, k, d);
    for v in cb.table_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut dups = Vec::new();
    for c in 0..classes {
        for _ in 0..4 {
            let a = rng.random_range(0..k - 1);
            let b = rng.random_range(a + 1..k);
            let (ga, gb) = (c * k + a, c * k + b);
            let src = cb.code(ga).to_vec();
            cb.table_mut()[gb * d..(gb + 1) * d].copy_from_slice(&src);
            dups.push(gb);
        }
    }
    cb.initialized.fill(true);
    let mut z = Vec::with_capacity(queries * d);
    let mut cls = Vec::with_capacity(queries);
    for q in 0..queries {
        if q % 3 == 0 {
            let g = dups[rng.random_range(0..dups.len())];
            z.extend_from_slice(cb.code(g));
            cls.push(g / k);
        } else {
            z.extend((0..d).map(|_| rng.random_range(-1.2..1.2)));
            cls.push(rng.random_range(0..classes));
        }
    }
    (cb, z, cls)
}

pub fn quantizer_agreement(queries: usize, tol: &Tolerances) -> Vec<OracleReport> {
    let (k, d, c) = (32, 64, 8);
    let (cb, z, cls) = tie_codebook(c, k, d, queries, RngKey::new(2024));
    let qr = quantize(&cb, &z, &cls);
    let row_class: Vec<usize> = (0..c * k).map(|g| g / k).collect();
    let (idx, dist) = oracle::brute_nn(cb.table(), d, &z, Some((&cls, &row_class)));
    let global = cb.nearest_global(&z);
    let (gidx, _) = oracle::brute_nn(cb.table(), d, &z, None);
    vec![
        OracleReport::exact("quant.class_masked_index", &qr.global, &idx),
        OracleReport::compare("quant.distance", &qr.distance, &dist, tol.score_rel, tol.metrics_abs),
        OracleReport::exact("quant.global_index", &global, &gidx),
    ]
}

pub fn quant_suite(tol: &Tolerances) -> Result<Vec<OracleReport>> {
    let mut out = quantizer_agreement(10_000, tol);
    let mut rng = RngKey::new(7).stream();
    let pts: Vec<[f64; 3]> = (0..300)
        .map(|_| std::array::from_fn(|_| rng.random_range(-6..6) as f64))
        .collect();
    let cloud = crate::pointcloud::PointCloud::new(
        pts.clone(),
        vec![0; pts.len()],
        crate::pointcloud::CloudMeta::new("knn", crate::pointcloud::Source::Synthetic),
    )?;
    let nn = knn(&cloud, 8)?;
    let brute = oracle::brute_knn(&pts, 8);
    let got: Vec<usize> = (0..pts.len()).flat_map(|i| nn.neighbors(i).to_vec()).collect();
    let want: Vec<usize> = brute.iter().flat_map(|r| r.iter().map(|&(j, _)| j)).collect();
    out.push(OracleReport::exact("quant.knn_index", &got, &want));
    Ok(out)
}

/// One statistics update of a single one-channel code with batch variance
/// 2.0 from σ² = 1.0 at γ = 0.9.
pub fn single_update_example() -> Result<f64> {
    let mut cb = CodebookState::new(1, 1, 1);
    let s = 2f64.sqrt();
    let z = [-s, s];
    let qr = quantize(&cb, &z, &[0, 0]);
    cb.update_code_stats(&z, &qr, 0.9)?;
    Ok(cb.variances[0])
}

/// Runs `steps` tiny-config steps with tracing on and replays the recorded
/// statistics updates from scratch.
pub fn stats_replay(steps: usize, tol: &Tolerances) -> Result<OracleReport> {
    let cfg = tiny_config();
    let clouds = tiny_scenes(4, 256, 60)?;
    let prepared = prepare_all(&clouds, &cfg)?;
    let mut state = TrainState::new(&cfg)?;
    state.stats_trace = Some(Vec::new());
    for s in 0..steps {
        let idx = [(2 * s) % 4, (2 * s + 1) % 4];
        train_step(&mut state, &batch_of(&clouds, &prepared, &idx), &cfg)?;
    }
    let trace = state.stats_trace.take().unwrap_or_default();
    let batches: Vec<(Vec<usize>, Vec<f64>)> = trace.into_iter().map(|r| (r.global, r.z_e)).collect();
    let cb = &state.codebook;
    let want = oracle::replay_stats(&batches, cb.num_codes(), cb.latent_dim, cfg.gamma, VAR_FLOOR, INIT_VARIANCE);
    let mut r = OracleReport::compare("stats.replay", &cb.variances, &want, 0.0, tol.stats_abs);
    r.cases = batches.len();
    Ok(r)
}

pub fn stats_suite(tol: &Tolerances) -> Result<Vec<OracleReport>> {
    let v = single_update_example()?;
    Ok(vec![
        OracleReport::compare("stats.single_update", &[v], &[1.1], 0.0, tol.stats_abs),
        stats_replay(50, tol)?,
    ])
}

/// Violation counts of the mask algebra over `batches` random augmented
/// clouds: complement on labeled rows, dilation monotone in the radius,
/// SSR shrinking as the threshold grows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskAlgebra {
    pub batches: usize,
    pub rows: usize,
    pub flagged: usize,
    pub complement_violations: usize,
    pub dilation_violations: usize,
    pub threshold_violations: usize,
}

pub fn mask_algebra(batches: usize) -> Result<MaskAlgebra> {
    let cfg = tiny_config();
    let clouds = tiny_scenes(4, 256, 80)?;
    let prepared = prepare_all(&clouds, &cfg)?;
    let state = warmed_state(&cfg, &clouds, &prepared, 120)?;
    let base = state.snapshot(&cfg)?;
    let snaps: Vec<PriorSnapshot> = [2.0, 3.0, 4.0]
        .iter()
        .map(|&t| base.with_threshold(t))
        .collect::<Result<_>>()?;
    let radii = [0.0, 0.5, 1.5];
    let presets = [
        AugmentPreset::Light,
        AugmentPreset::Moderate,
        AugmentPreset::Heavy,
        AugmentPreset::Excessive,
        AugmentPreset::Random,
    ];
    let key = RngKey::new(99);
    let mut out = MaskAlgebra {
        batches,
        ..MaskAlgebra::default()
    };
    for b in 0..batches {
        let cloud = &clouds[b % clouds.len()];
        let acfg = AugmentConfig::preset(presets[b % presets.len()]);
        let aug = augment_pair(cloud, &acfg, key.derive(b as u64), None)?;
        let prep = prepare(&aug.cloud, cfg.voxel_size)?;
        let pred = state.seg.predict(&prep.features)?;
        let rows = prep.row_cloud(&aug.cloud);
        let mut by_t = Vec::new();
        for snap in &snaps {
            let mut by_r = Vec::new();
            for &r in &radii {
                let m = localize(snap, pred.probs.values(), &prep.labels, &rows, r)?;
                for (i, &l) in prep.labels.iter().enumerate() {
                    let ok = if l == IGNORE { !m.scr[i] && !m.ssr[i] } else { m.scr[i] != m.ssr[i] };
                    out.complement_violations += (!ok) as usize;
                }
                by_r.push(m.ssr);
            }
            for w in by_r.windows(2) {
                out.dilation_violations += w[0].iter().zip(&w[1]).filter(|(a, b)| **a && !**b).count();
            }
            by_t.push(by_r);
        }
        for w in by_t.windows(2) {
            for (lo, hi) in w[0].iter().zip(&w[1]) {
                out.threshold_violations += lo.iter().zip(hi).filter(|(a, b)| !**a && **b).count();
            }
        }
        out.rows += prep.labels.len();
        out.flagged += by_t[0][0].iter().filter(|&&b| b).count();
    }
    Ok(out)
}

pub fn metrics_suite(tol: &Tolerances) -> Result<Vec<OracleReport>> {
    let mut rng = RngKey::new(31).stream();
    let (mut got_iou, mut want_iou) = (Vec::new(), Vec::new());
    let (mut got_conf, mut want_conf) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let c = rng.random_range(2..7usize);
        let n = rng.random_range(1..60usize);
        let labels: Vec<u16> = (0..n)
            .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..c as u16) })
            .collect();
        let preds: Vec<u16> = (0..n).map(|_| rng.random_range(0..c as u16)).collect();
        let r = iou(&preds, &labels, c);
        for (cls, (tp, fp, fn_)) in oracle::count_tp_fp_fn(&preds, &labels, c, IGNORE).into_iter().enumerate() {
            let den = tp + fp + fn_;
            got_iou.push(r.per_class[cls].unwrap_or(-1.0));
            want_iou.push(if den == 0 { -1.0 } else { tp as f64 / den as f64 });
        }
        got_conf.extend(confusion(&preds, &labels, c).into_iter().flatten());
        want_conf.extend(oracle::confusion_by_counting(&preds, &labels, c, IGNORE).into_iter().flatten());
    }
    let mut out = vec![
        OracleReport::compare("metrics.iou", &got_iou, &want_iou, 0.0, tol.metrics_abs),
        OracleReport::compare("metrics.confusion", &got_conf, &want_conf, 0.0, tol.metrics_abs),
    ];

    // shift scores against compensated re-evaluation
    let (cb, z, cls) = tie_codebook(3, 5, 6, 300, RngKey::new(32));
    let mut cb = cb;
    for v in cb.variances.iter_mut() {
        *v = rng.random_range(0.05..2.0);
    }
    let ae = crate::scp::PriorAutoencoder::new(crate::scp::PriorKind::Prototype, 3, 6, RngKey::new(0));
    let snap = PriorSnapshot::capture(&ae, &cb, 3.0)?;
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for (q, row) in z.chunks(6).enumerate() {
        let (s, j) = shift_score(&snap, row, cls[q]);
        let g = cls[q] * 5 + j;
        let e = cb.code(g);
        let v = cb.variance(g);
        let m = oracle::ksum((0..6).map(|ch| (row[ch] - e[ch]) * (row[ch] - e[ch]) / v[ch]));
        got.push(s);
        want.push((m / 6.0).sqrt());
    }
    out.push(OracleReport::compare("metrics.shift_score", &got, &want, tol.score_rel, tol.metrics_abs));

    let m = mask_algebra(100)?;
    let violations = m.complement_violations + m.dilation_violations + m.threshold_violations;
    out.push(OracleReport {
        check: "metrics.mask_algebra".into(),
        cases: m.rows,
        max_abs_err: violations as f64,
        max_rel_err: 0.0,
        tolerance: 0.0,
        // a run that flags nothing proves nothing
        pass: violations == 0 && m.flagged > 0,
    });
    Ok(out)
}
