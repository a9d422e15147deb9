use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use shiftseg::augment::AugmentPreset;
use shiftseg::dataset::{load_cloud, make_split, save_cloud, DatasetSplit, SceneSpec};
use shiftseg::eval::{evaluate, ssr_curve, EvalOptions, MetricsReport};
use shiftseg::pointcloud::PointCloud;
use shiftseg::segnet::{prepare, Prepared};
use shiftseg::tensor::Checkpoint;
use shiftseg::trainer::{
    eval_key, prior_fit, run, Curriculum, DistillTarget, PriorSource, RunObserver, RunOutput, Silent, StepLog,
    TrainConfig, TrainMode, TrainState,
};
use shiftseg::verify::{run_suite, Suite, Tolerances};

use crate::output::{
    io_err, now_unix, prepare_out, subdir, write_csv, write_json, write_manifest, write_text, CONFIG, SPLIT, STEPLOG,
};
use crate::{AblateArgs, CliError, EvalArgs, GenArgs, Outcome, TrainArgs, VerifyArgs};

pub fn cloud_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.a3pc"))
}

pub fn cmd_gen(a: &GenArgs, argv: &[String]) -> Result<Outcome, CliError> {
    let started = now_unix();
    if a.scenes == 0 {
        return Err(CliError::Usage("--scenes must be positive".into()));
    }
    let mut spec = SceneSpec::new(a.seed);
    spec.num_points = a.points;
    spec.class_count = a.classes;
    let (split, clouds) = make_split(a.seed, a.scenes, a.val_fraction, &spec)?;
    prepare_out(&a.out, a.force)?;
    for c in &clouds {
        save_cloud(&cloud_file(&a.out, c.id()), c, a.classes as u16)?;
    }
    write_json(&a.out.join(SPLIT), &split)?;
    write_manifest(&a.out, "gen", argv, None, Some(a.seed), started)?;
    Ok(Outcome::default())
}

/// Train and val clouds of a generated dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, Vec<PointCloud>, Vec<PointCloud>), CliError> {
    let split_path = dir.join(SPLIT);
    let text = fs::read_to_string(&split_path)
        .map_err(|_| CliError::Usage(format!("no dataset at {} (missing {SPLIT})", dir.display())))?;
    let split: DatasetSplit =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", split_path.display())))?;
    let load = |ids: &[String]| -> Result<Vec<PointCloud>, CliError> {
        ids.iter().map(|id| Ok(load_cloud(&cloud_file(dir, id))?.0)).collect()
    };
    let train = load(&split.train)?;
    let val = load(&split.val)?;
    Ok((split, train, val))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let mut cfg = match path {
        Some(p) if !p.exists() => return Err(CliError::Usage(format!("config {} not found", p.display()))),
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the step log, per-epoch reports and due checkpoints of one run.
struct RunFiles {
    steplog: BufWriter<File>,
    reports: PathBuf,
    ckpt: PathBuf,
    stop_after: Option<usize>,
    epochs_run: usize,
    distill_steps: usize,
}

impl RunObserver for RunFiles {
    fn on_step(&mut self, log: &StepLog) -> shiftseg::Result<()> {
        self.distill_steps += log.l_distill.is_some() as usize;
        writeln!(self.steplog, "{}", log.to_json_line()).map_err(|e| shiftseg::Error::Config(e.to_string()))
    }

    fn on_epoch(&mut self, state: &TrainState, report: Option<&MetricsReport>, due: bool) -> shiftseg::Result<()> {
        self.epochs_run += 1;
        let io = |e: CliError| shiftseg::Error::Config(e.to_string());
        if let Some(r) = report {
            write_json(&self.reports.join(format!("epoch_{:04}.json", state.epoch)), r).map_err(io)?;
        }
        if due {
            self.steplog.flush().map_err(|e| shiftseg::Error::Config(e.to_string()))?;
            state
                .to_checkpoint()
                .save(&self.ckpt.join(format!("epoch_{:04}.a3wt", state.epoch)))?;
        }
        Ok(())
    }

    fn should_stop(&mut self, _state: &TrainState) -> bool {
        self.stop_after.is_some_and(|n| self.epochs_run >= n)
    }
}

/// Checkpoint with the highest epoch number in `ckpt_dir`.
pub fn latest_checkpoint(ckpt_dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(ckpt_dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "a3wt"))
        .collect();
    found.sort();
    found.pop()
}

/// Keeps only step-log lines from before `step` (lines written after the
/// checkpoint of an interrupted run are replayed on resume).
fn truncate_steplog(path: &Path, step: u64) -> Result<(), CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| CliError::Failed(e.to_string()))?;
        if v["step"].as_u64().is_some_and(|s| s < step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    miou: f64,
    miou_all: f64,
}

#[derive(Serialize)]
struct LevelRow {
    level: String,
    miou: f64,
    miou_all: f64,
    subregion_miou: Option<f64>,
    subregion_fraction: Option<f64>,
    ssr_ratio: Option<f64>,
    teacher_agreement: Option<f64>,
}

impl From<&MetricsReport> for LevelRow {
    fn from(r: &MetricsReport) -> Self {
        LevelRow {
            level: r.level.clone(),
            miou: r.miou,
            miou_all: r.miou_all,
            subregion_miou: r.subregion.as_ref().map(|s| s.miou),
            subregion_fraction: r.subregion.as_ref().map(|s| s.mask_fraction),
            ssr_ratio: r.ssr_ratio.get(&r.level).copied(),
            teacher_agreement: r.teacher_agreement,
        }
    }
}

struct TrainResult {
    output: RunOutput,
    distill_steps: usize,
}

/// Runs one training into `out`, which must already be prepared.
fn train_into(
    cfg: &TrainConfig,
    train: &[PointCloud],
    val: &[PointCloud],
    out: &Path,
    resume: Option<TrainState>,
    stop_after: Option<usize>,
) -> Result<TrainResult, CliError> {
    let steplog_path = out.join(STEPLOG);
    let steplog = match &resume {
        Some(state) => {
            if steplog_path.exists() {
                truncate_steplog(&steplog_path, state.step)?;
            }
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&steplog_path)
                .map_err(io_err(&steplog_path))?
        }
        None => File::create(&steplog_path).map_err(io_err(&steplog_path))?,
    };
    let mut files = RunFiles {
        steplog: BufWriter::new(steplog),
        reports: subdir(out, "reports")?,
        ckpt: subdir(out, "ckpt")?,
        stop_after,
        epochs_run: 0,
        distill_steps: 0,
    };
    let output = run(cfg, train, val, resume, &mut files)?;
    files.steplog.flush().map_err(io_err(&steplog_path))?;
    let csv_dir = subdir(out, "csv")?;
    // rebuild the epoch table from every report on disk so a resumed run
    // lists the epochs of earlier invocations too
    let mut rows = Vec::new();
    for e in 1..=output.state.epoch {
        let p = files.reports.join(format!("epoch_{e:04}.json"));
        if let Ok(text) = fs::read_to_string(&p) {
            let r: MetricsReport = serde_json::from_str(&text).map_err(|e| CliError::Failed(e.to_string()))?;
            rows.push(EpochRow {
                epoch: e,
                miou: r.miou,
                miou_all: r.miou_all,
            });
        }
    }
    write_csv(&csv_dir.join("epochs.csv"), &rows)?;
    if !output.final_reports.is_empty() {
        for r in &output.final_reports {
            write_json(&files.reports.join(format!("final_{}.json", r.level)), r)?;
        }
        let rows: Vec<LevelRow> = output.final_reports.iter().map(LevelRow::from).collect();
        write_csv(&csv_dir.join("final.csv"), &rows)?;
    }
    Ok(TrainResult {
        output,
        distill_steps: files.distill_steps,
    })
}

pub fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<Outcome, CliError> {
    let started = now_unix();
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = &a.mode {
        cfg.mode = TrainMode::parse(m)
            .ok_or_else(|| CliError::Usage(format!("unknown mode `{m}` (expected none, eas, eas+scr or full)")))?;
    }
    let (_, train, val) = load_dataset(&a.data)?;
    let resume = if a.resume {
        let saved = TrainConfig::load(&a.out.join(CONFIG))
            .map_err(|e| CliError::Usage(format!("cannot resume from {}: {e}", a.out.display())))?;
        if saved.hash() != cfg.hash() {
            return Err(CliError::Usage("config differs from the run being resumed".into()));
        }
        let path = latest_checkpoint(&a.out.join("ckpt"))
            .ok_or_else(|| CliError::Usage(format!("no checkpoint to resume in {}", a.out.display())))?;
        Some(TrainState::from_checkpoint(&cfg, &Checkpoint::load(&path)?)?)
    } else {
        prepare_out(&a.out, a.force)?;
        write_text(&a.out.join(CONFIG), &(cfg.to_json() + "\n"))?;
        None
    };
    train_into(&cfg, &train, &val, &a.out, resume, a.stop_after)?;
    write_manifest(&a.out, "train", argv, Some(cfg.hash()), Some(cfg.seed), started)?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct CurveRow {
    level: String,
    ssr_ratio: f64,
}

pub fn parse_levels(list: &str) -> Result<Vec<AugmentPreset>, CliError> {
    let levels: Vec<AugmentPreset> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| AugmentPreset::parse(s).ok_or_else(|| CliError::Usage(format!("unknown augmentation level `{s}`"))))
        .collect::<Result<_, _>>()?;
    if levels.is_empty() {
        return Err(CliError::Usage("--levels is empty".into()));
    }
    Ok(levels)
}

/// Clean or augmented report of `state` at `level`, keyed exactly as the
/// final evaluation of a training run.
pub fn evaluate_level(
    state: &TrainState,
    cfg: &TrainConfig,
    clouds: &[PointCloud],
    level: AugmentPreset,
) -> Result<MetricsReport, CliError> {
    let snap = if state.prior_ready() { Some(state.snapshot(cfg)?) } else { None };
    let opts = EvalOptions {
        preset: level,
        voxel_size: cfg.voxel_size,
        key: eval_key(cfg).derive_tag(level.name()),
        snapshot: snap.as_ref(),
        dilation_radius: cfg.dilation_radius,
        teacher: state.teacher.as_ref(),
        subregion: true,
    };
    let mut r = evaluate(&state.seg, clouds, &opts)?;
    r.seed = cfg.seed;
    r.config_hash = cfg.hash();
    r.epoch = Some(state.epoch);
    Ok(r)
}

pub fn cmd_eval(a: &EvalArgs, argv: &[String]) -> Result<Outcome, CliError> {
    let started = now_unix();
    if !a.ckpt.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", a.ckpt.display())));
    }
    let cfg_path = match &a.config {
        Some(p) => p.clone(),
        None => a
            .ckpt
            .parent()
            .and_then(Path::parent)
            .map(|d| d.join(CONFIG))
            .ok_or_else(|| CliError::Usage("cannot locate the run config; pass --config".into()))?,
    };
    if !cfg_path.is_file() {
        return Err(CliError::Usage(format!(
            "run config {} not found; pass --config",
            cfg_path.display()
        )));
    }
    let cfg = load_config(Some(&cfg_path))?;
    let levels = parse_levels(&a.levels)?;
    let (_, train, val) = load_dataset(&a.data)?;
    let clouds = if val.is_empty() { train } else { val };
    let state = TrainState::from_checkpoint(&cfg, &Checkpoint::load(&a.ckpt)?)?;
    prepare_out(&a.out, a.force)?;
    write_text(&a.out.join(CONFIG), &(cfg.to_json() + "\n"))?;
    let reports_dir = subdir(&a.out, "reports")?;
    let csv_dir = subdir(&a.out, "csv")?;
    let mut rows = Vec::new();
    for &level in &levels {
        let r = evaluate_level(&state, &cfg, &clouds, level)?;
        write_json(&reports_dir.join(format!("{}.json", level.name())), &r)?;
        rows.push(LevelRow::from(&r));
    }
    write_csv(&csv_dir.join("levels.csv"), &rows)?;
    if state.prior_ready() {
        let snap = state.snapshot(&cfg)?;
        let curve = ssr_curve(
            &state.seg,
            &snap,
            &clouds,
            &levels,
            a.trials,
            cfg.voxel_size,
            cfg.dilation_radius,
            eval_key(&cfg).derive_tag("ssr-curve"),
        )?;
        let rows: Vec<CurveRow> = curve
            .into_iter()
            .map(|(l, r)| CurveRow {
                level: l.name().to_string(),
                ssr_ratio: r,
            })
            .collect();
        write_csv(&csv_dir.join("ssr_curve.csv"), &rows)?;
    } else {
        eprintln!("note: checkpoint has no shape prior; ssr_curve.csv not written");
    }
    write_manifest(&a.out, "eval", argv, Some(cfg.hash()), Some(cfg.seed), started)?;
    Ok(Outcome::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    K,
    D,
    T,
    Lambda,
    Prior,
    Distill,
    Curriculum,
}

impl Sweep {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "k" => Sweep::K,
            "D" | "d" => Sweep::D,
            "t" => Sweep::T,
            "lambda" => Sweep::Lambda,
            "prior" => Sweep::Prior,
            "distill" => Sweep::Distill,
            "curriculum" => Sweep::Curriculum,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Sweep::K => "k",
            Sweep::D => "D",
            Sweep::T => "t",
            Sweep::Lambda => "lambda",
            Sweep::Prior => "prior",
            Sweep::Distill => "distill",
            Sweep::Curriculum => "curriculum",
        }
    }

    /// Config key the sweep varies.
    pub fn field(self) -> &'static str {
        match self {
            Sweep::K => "codes_per_class",
            Sweep::D => "latent_dim",
            Sweep::T => "threshold",
            Sweep::Lambda => "lambda",
            Sweep::Prior => "prior_source",
            Sweep::Distill => "distill_target",
            Sweep::Curriculum => "curriculum",
        }
    }
}

/// One labelled config per grid cell; `offline_prior` is the checkpoint the
/// offline cell loads.
pub fn sweep_cells(sweep: Sweep, base: &TrainConfig, offline_prior: &Path) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match sweep {
        Sweep::K => [16, 32, 64]
            .into_iter()
            .map(|k| (k.to_string(), with(&|c| c.codes_per_class = k)))
            .collect(),
        Sweep::D => [32, 64, 128]
            .into_iter()
            .map(|d| (d.to_string(), with(&|c| c.latent_dim = d)))
            .collect(),
        Sweep::T => [2.0, 3.0, 4.0]
            .into_iter()
            .map(|t| (t.to_string(), with(&|c| c.threshold = t)))
            .collect(),
        Sweep::Lambda => [0.02, 0.1, 0.5]
            .into_iter()
            .map(|l| (l.to_string(), with(&|c| c.lambda = l)))
            .collect(),
        Sweep::Prior => vec![
            ("online".into(), with(&|c| c.prior_source = PriorSource::Online)),
            (
                "offline".into(),
                with(&|c| c.prior_source = PriorSource::Offline(offline_prior.to_path_buf())),
            ),
            ("gt".into(), with(&|c| c.prior_source = PriorSource::Gt)),
        ],
        Sweep::Distill => [
            ("global", DistillTarget::Global),
            ("class_conditional", DistillTarget::ClassConditional),
            ("none", DistillTarget::None),
        ]
        .into_iter()
        .map(|(n, d)| (n.to_string(), with(&|c| c.distill_target = d)))
        .collect(),
        Sweep::Curriculum => [("off", Curriculum::Off), ("staged", Curriculum::Staged)]
            .into_iter()
            .map(|(n, v)| (n.to_string(), with(&|c| c.curriculum = v)))
            .collect(),
    }
}

/// Trains a segmentation model without any prior, then fits the prior on its
/// frozen predictions for as many updates as an online run would make.
pub fn build_offline_prior(base: &TrainConfig, train: &[PointCloud], path: &Path) -> Result<(), CliError> {
    let mut src = base.clone();
    src.mode = TrainMode::Eas;
    src.prior_source = PriorSource::Online;
    let mut state = run(&src, train, &[], None, &mut Silent)?.state;
    let prepared: Vec<Prepared> = train
        .iter()
        .map(|c| prepare(c, base.voxel_size))
        .collect::<shiftseg::Result<_>>()?;
    let steps = base.epochs * train.len().div_ceil(base.batch_size);
    prior_fit(&mut state, &src, &prepared, steps.max(1))?;
    state.to_checkpoint().save(path)?;
    Ok(())
}

#[derive(Serialize)]
struct AblateRow {
    sweep: String,
    value: String,
    field: String,
    config_hash: String,
    clean_miou: Option<f64>,
    heavy_miou: Option<f64>,
    heavy_ssr_ratio: Option<f64>,
    distill_steps: usize,
}

pub fn cmd_ablate(a: &AblateArgs, argv: &[String]) -> Result<Outcome, CliError> {
    let started = now_unix();
    let sweep = Sweep::parse(&a.sweep).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown sweep `{}` (expected k, D, t, lambda, prior, distill or curriculum)",
            a.sweep
        ))
    })?;
    let base = load_config(a.config.as_deref())?;
    let (_, train, val) = load_dataset(&a.data)?;
    prepare_out(&a.out, a.force)?;
    write_text(&a.out.join(CONFIG), &(base.to_json() + "\n"))?;
    let offline = a.out.join("prior").join("offline.a3wt");
    if sweep == Sweep::Prior {
        subdir(&a.out, "prior")?;
        build_offline_prior(&base, &train, &offline)?;
    }
    let cells_dir = subdir(&a.out, "cells")?;
    let mut rows = Vec::new();
    for (label, cfg) in sweep_cells(sweep, &base, &offline) {
        let cell_started = now_unix();
        let dir = cells_dir.join(format!("{}={label}", sweep.name()));
        prepare_out(&dir, false)?;
        write_text(&dir.join(CONFIG), &(cfg.to_json() + "\n"))?;
        let res = train_into(&cfg, &train, &val, &dir, None, None)?;
        let fin = |level: &str| res.output.final_reports.iter().find(|r| r.level == level);
        rows.push(AblateRow {
            sweep: sweep.name().to_string(),
            value: label,
            field: sweep.field().to_string(),
            config_hash: cfg.hash(),
            clean_miou: fin("none").map(|r| r.miou),
            heavy_miou: fin("heavy").map(|r| r.miou),
            heavy_ssr_ratio: fin("heavy").and_then(|r| r.ssr_ratio.get("heavy").copied()),
            distill_steps: res.distill_steps,
        });
        write_manifest(&dir, "ablate-cell", argv, Some(cfg.hash()), Some(cfg.seed), cell_started)?;
    }
    let csv_dir = subdir(&a.out, "csv")?;
    write_csv(&csv_dir.join(format!("ablate_{}.csv", sweep.name())), &rows)?;
    write_manifest(&a.out, "ablate", argv, Some(base.hash()), Some(base.seed), started)?;
    Ok(Outcome::default())
}

pub fn cmd_verify(a: &VerifyArgs, argv: &[String]) -> Result<Outcome, CliError> {
    let started = now_unix();
    let suite = Suite::parse(&a.suite).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown suite `{}` (expected grad, quant, stats, metrics or all)",
            a.suite
        ))
    })?;
    let tol = match &a.tolerances {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| CliError::Usage(format!("{} not found", p.display())))?;
            serde_json::from_str::<Tolerances>(&text)
                .map_err(|e| CliError::Usage(format!("tolerances {}: {e}", p.display())))?
        }
        None => Tolerances::default(),
    };
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
    }
    let reports = run_suite(suite, &tol)?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("{json}");
    let failed = reports.iter().filter(|r| !r.pass).count();
    for r in reports.iter().filter(|r| !r.pass) {
        eprintln!(
            "FAIL {}: max abs err {:e}, max rel err {:e}, tolerance {:e}",
            r.check, r.max_abs_err, r.max_rel_err, r.tolerance
        );
    }
    if let Some(out) = &a.out {
        write_json(&out.join("verify.json"), &reports)?;
        write_manifest(out, "verify", argv, None, None, started)?;
    }
    Ok(Outcome { failed: failed > 0 })
}
