use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shiftseg::augment::AugmentPreset;
use shiftseg::dataset::{load_cloud, make_split, SceneSpec};
use shiftseg::eval::MetricsReport;
use shiftseg::tensor::Checkpoint;
use shiftseg::trainer::{TrainConfig, TrainState};
use shiftseg_cli::commands::{evaluate_level, load_dataset};
use shiftseg_cli::{run_cli, RunManifest};
use tempfile::TempDir;

const SMALL: &str = r#"{"epochs": 2, "batch_size": 2, "hidden": [16], "codes_per_class": 4, "latent_dim": 8, "threshold": 0.5, "checkpoint_every": 1}"#;

fn bin(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shiftseg"));
    c.args(args).env("SOURCE_DATE_EPOCH", "1000").env_remove("A3_SEED");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("shiftseg").chain(args.iter().copied()))
}

struct Fixture {
    tmp: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            tmp: tempfile::tempdir().unwrap(),
        };
        fs::write(f.path("small.json"), SMALL).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn gen(&self, name: &str, scenes: usize, seed: u64) {
        let code = cli(&[
            "gen",
            "--scenes",
            &scenes.to_string(),
            "--points",
            "384",
            "--seed",
            &seed.to_string(),
            "--out",
            &self.s(name),
        ]);
        assert_eq!(code, 0);
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) -> i32 {
        let cfg = self.s("small.json");
        let (d, o) = (self.s(data), self.s(out));
        let mut args = vec!["train", "--config", &cfg, "--data", &d, "--out", &o];
        args.extend_from_slice(extra);
        cli(&args)
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_writes_clouds_split_and_manifest() {
    let f = Fixture::new();
    f.gen("d", 4, 1);
    let all = files(&f.path("d"));
    assert_eq!(all.keys().filter(|k| k.ends_with(".a3pc")).count(), 4);
    assert!(all.contains_key("split.json"));
    let m = manifest(&f.path("d"));
    assert_eq!(m.command, "gen");
    assert_eq!(m.seed, Some(1));
    assert_eq!(m.layout, all.keys().cloned().collect::<Vec<_>>());
}

#[test]
fn gen_refuses_non_empty_dir_and_force_rerun_is_identical() {
    let f = Fixture::new();
    let args = ["gen", "--scenes", "3", "--points", "256", "--seed", "5", "--out"];
    let out = f.s("d");
    let run = |force: bool| {
        let mut a: Vec<&str> = args.to_vec();
        a.push(&out);
        if force {
            a.push("--force");
        }
        bin(&a, &[])
    };
    assert!(run(false).status.success());
    let first = files(&f.path("d"));
    let refused = run(false);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    let m1 = manifest(&f.path("d"));
    assert!(run(true).status.success());
    let mut second = files(&f.path("d"));
    let mut first = first;
    first.remove("manifest.json");
    second.remove("manifest.json");
    assert_eq!(first, second);
    let m2 = manifest(&f.path("d"));
    assert_eq!((m1.config_hash, m1.layout), (m2.config_hash, m2.layout));
    assert_eq!(m2.args.last().map(String::as_str), Some("--force"));
}

#[test]
fn force_leaves_foreign_files_alone() {
    let f = Fixture::new();
    fs::create_dir_all(f.path("d")).unwrap();
    fs::write(f.path("d/notes.txt"), "keep").unwrap();
    assert_eq!(cli(&["gen", "--scenes", "2", "--points", "256", "--out", &f.s("d"), "--force"]), 0);
    assert_eq!(fs::read_to_string(f.path("d/notes.txt")).unwrap(), "keep");
}

#[test]
fn generated_labels_match_direct_generation() {
    let f = Fixture::new();
    f.gen("d", 4, 7);
    let mut spec = SceneSpec::new(7);
    spec.num_points = 384;
    let (split, clouds) = make_split(7, 4, 0.25, &spec).unwrap();
    let (written, _, _) = load_dataset(&f.path("d")).unwrap();
    assert_eq!(written, split);
    for c in &clouds {
        let (loaded, classes) = load_cloud(&f.path("d").join(format!("{}.a3pc", c.id()))).unwrap();
        assert_eq!(classes, 8);
        let hist = |l: &[u16]| {
            let mut h = BTreeMap::new();
            for &x in l {
                *h.entry(x).or_insert(0usize) += 1;
            }
            h
        };
        assert_eq!(hist(loaded.labels()), hist(c.labels()));
    }
}

#[test]
fn train_writes_the_documented_layout() {
    let f = Fixture::new();
    f.gen("d", 4, 1);
    assert_eq!(f.train("d", "r", &[]), 0);
    let all = files(&f.path("r"));
    for k in [
        "manifest.json",
        "config.json",
        "steplog.ndjson",
        "ckpt/epoch_0001.a3wt",
        "ckpt/epoch_0002.a3wt",
        "reports/epoch_0001.json",
        "reports/epoch_0002.json",
        "reports/final_none.json",
        "reports/final_heavy.json",
        "csv/epochs.csv",
        "csv/final.csv",
    ] {
        assert!(all.contains_key(k), "missing {k}");
    }
    let cfg = TrainConfig::load(&f.path("r/config.json")).unwrap();
    assert_eq!(manifest(&f.path("r")).config_hash, Some(cfg.hash()));
}

#[test]
fn eas_mode_step_logs_carry_no_codebook_fields() {
    let f = Fixture::new();
    f.gen("d", 4, 2);
    assert_eq!(f.train("d", "r", &["--mode", "eas"]), 0);
    let log = fs::read_to_string(f.path("r/steplog.ndjson")).unwrap();
    assert!(!log.is_empty());
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["mode"], "eas");
        for key in ["vq", "l_distill", "ssr_ratio", "ssr_rows"] {
            assert!(v.get(key).is_none(), "{key} in {line}");
        }
    }
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let f = Fixture::new();
    f.gen("d", 2, 2);
    assert_eq!(f.train("d", "r", &["--mode", "fast"]), 2);
}

#[test]
fn unknown_config_key_is_refused_by_name() {
    let f = Fixture::new();
    f.gen("d", 2, 3);
    fs::write(f.path("bad.json"), r#"{"epochs": 1, "learning_rat": 0.1}"#).unwrap();
    let out = bin(
        &["train", "--config", &f.s("bad.json"), "--data", &f.s("d"), "--out", &f.s("r")],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert!(!f.path("r").exists());
}

#[test]
fn seed_environment_variable_overrides_config() {
    let f = Fixture::new();
    f.gen("d", 2, 3);
    let out = bin(
        &["train", "--config", &f.s("small.json"), "--data", &f.s("d"), "--out", &f.s("r")],
        &[("A3_SEED", "17")],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(TrainConfig::load(&f.path("r/config.json")).unwrap().seed, 17);
    assert_eq!(manifest(&f.path("r")).seed, Some(17));
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_outputs() {
    let f = Fixture::new();
    fs::write(
        f.path("small.json"),
        SMALL.replace("\"epochs\": 2", "\"epochs\": 4"),
    )
    .unwrap();
    f.gen("d", 4, 4);
    assert_eq!(f.train("d", "full", &[]), 0);
    assert_eq!(f.train("d", "cut", &["--stop-after", "2"]), 0);
    assert!(!f.path("cut/reports/final_none.json").exists());
    assert_eq!(f.train("d", "cut", &["--resume"]), 0);
    let strip = |m: BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
        m.into_iter().filter(|(k, _)| k != "manifest.json").collect()
    };
    assert_eq!(strip(files(&f.path("full"))), strip(files(&f.path("cut"))));
}

#[test]
fn resume_with_a_changed_config_is_refused() {
    let f = Fixture::new();
    f.gen("d", 2, 4);
    assert_eq!(f.train("d", "r", &["--stop-after", "1"]), 0);
    assert_eq!(f.train("d", "r", &["--resume", "--mode", "eas"]), 2);
}

#[test]
fn eval_levels_match_direct_evaluation_and_rerun_bytes() {
    let f = Fixture::new();
    f.gen("d", 4, 5);
    assert_eq!(f.train("d", "r", &[]), 0);
    let ckpt = f.s("r/ckpt/epoch_0002.a3wt");
    let eval = |out: &str, levels: &str| cli(&["eval", "--ckpt", &ckpt, "--data", &f.s("d"), "--levels", levels, "--out", &f.s(out)]);
    assert_eq!(eval("e1", "none,heavy,excessive"), 0);
    assert_eq!(eval("e2", "none,heavy,excessive"), 0);
    for name in ["csv/levels.csv", "csv/ssr_curve.csv"] {
        let a = fs::read(f.path("e1").join(name)).unwrap();
        assert_eq!(a, fs::read(f.path("e2").join(name)).unwrap(), "{name}");
    }
    // the final reports of training used the same keys
    for level in ["none", "heavy"] {
        let from_eval: MetricsReport =
            serde_json::from_str(&fs::read_to_string(f.path(&format!("e1/reports/{level}.json"))).unwrap()).unwrap();
        let from_train: MetricsReport =
            serde_json::from_str(&fs::read_to_string(f.path(&format!("r/reports/final_{level}.json"))).unwrap())
                .unwrap();
        assert_eq!(from_eval, from_train);
    }
    // and a direct call agrees with the CLI
    let cfg = TrainConfig::load(&f.path("r/config.json")).unwrap();
    let state = TrainState::from_checkpoint(&cfg, &Checkpoint::load(Path::new(&ckpt)).unwrap()).unwrap();
    let (_, _, val) = load_dataset(&f.path("d")).unwrap();
    let direct = evaluate_level(&state, &cfg, &val, AugmentPreset::Excessive).unwrap();
    let from_eval: MetricsReport =
        serde_json::from_str(&fs::read_to_string(f.path("e1/reports/excessive.json")).unwrap()).unwrap();
    assert_eq!(direct, from_eval);
}

#[test]
fn eval_single_clean_level() {
    let f = Fixture::new();
    f.gen("d", 4, 6);
    assert_eq!(f.train("d", "r", &["--mode", "eas"]), 0);
    let code = cli(&["eval", "--ckpt", &f.s("r/ckpt/epoch_0002.a3wt"), "--data", &f.s("d"), "--levels", "none", "--out", &f.s("e")]);
    assert_eq!(code, 0);
    let reports: Vec<String> = files(&f.path("e/reports")).into_keys().collect();
    assert_eq!(reports, ["none.json"]);
    let csv = fs::read_to_string(f.path("e/csv/levels.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    // an eas checkpoint has no prior, hence no curve
    assert!(!f.path("e/csv/ssr_curve.csv").exists());
}

#[test]
fn eval_refuses_missing_checkpoint_and_bad_levels() {
    let f = Fixture::new();
    f.gen("d", 2, 6);
    assert_eq!(cli(&["eval", "--ckpt", &f.s("nope.a3wt"), "--data", &f.s("d"), "--out", &f.s("e")]), 2);
    assert_eq!(f.train("d", "r", &["--stop-after", "1"]), 0);
    let ck = f.s("r/ckpt/epoch_0001.a3wt");
    assert_eq!(cli(&["eval", "--ckpt", &ck, "--data", &f.s("d"), "--levels", "stormy", "--out", &f.s("e")]), 2);
}

fn ablate(f: &Fixture, sweep: &str, out: &str) -> i32 {
    cli(&["ablate", "--config", &f.s("small.json"), "--sweep", sweep, "--data", &f.s("d"), "--out", &f.s(out)])
}

fn csv_column(path: &Path, col: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let rows: Vec<BTreeMap<String, String>> = r.deserialize().map(Result::unwrap).collect();
    rows.into_iter().map(|mut m| m.remove(col).unwrap()).collect()
}

fn cell_diff(base: &Path, cell: &Path) -> Vec<String> {
    let read = |p: &Path| -> serde_json::Map<String, serde_json::Value> {
        serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
    };
    let (b, c) = (read(base), read(cell));
    assert_eq!(b.len(), c.len());
    b.iter().filter(|(k, v)| c.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

#[test]
fn threshold_sweep_runs_three_cells_varying_one_field() {
    let f = Fixture::new();
    f.gen("d", 4, 8);
    assert_eq!(ablate(&f, "t", "a"), 0);
    let csv = f.path("a/csv/ablate_t.csv");
    assert_eq!(csv_column(&csv, "value"), ["2", "3", "4"]);
    let cells: Vec<PathBuf> = fs::read_dir(f.path("a/cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cells.len(), 3);
    for c in cells {
        let diff = cell_diff(&f.path("a/config.json"), &c.join("config.json"));
        assert_eq!(diff, ["threshold"], "{}", c.display());
        assert!(c.join("manifest.json").exists());
    }
}

#[test]
fn prior_sweep_runs_online_offline_gt() {
    let f = Fixture::new();
    f.gen("d", 4, 9);
    assert_eq!(ablate(&f, "prior", "a"), 0);
    assert_eq!(csv_column(&f.path("a/csv/ablate_prior.csv"), "value"), ["online", "offline", "gt"]);
    assert!(f.path("a/prior/offline.a3wt").exists());
    for v in ["offline", "gt"] {
        let diff = cell_diff(&f.path("a/config.json"), &f.path(&format!("a/cells/prior={v}/config.json")));
        assert_eq!(diff, ["prior_source"]);
    }
}

#[test]
fn grid_sweeps_list_their_values() {
    use shiftseg_cli::commands::{sweep_cells, Sweep};
    let base = TrainConfig::default();
    let p = Path::new("prior.a3wt");
    let values = |s| sweep_cells(s, &base, p).into_iter().map(|(l, _)| l).collect::<Vec<_>>();
    assert_eq!(values(Sweep::K), ["16", "32", "64"]);
    assert_eq!(values(Sweep::D), ["32", "64", "128"]);
    assert_eq!(values(Sweep::Lambda), ["0.02", "0.1", "0.5"]);
    assert_eq!(values(Sweep::Distill), ["global", "class_conditional", "none"]);
    assert_eq!(values(Sweep::Curriculum), ["off", "staged"]);
}

#[test]
fn unknown_sweep_is_refused() {
    let f = Fixture::new();
    f.gen("d", 2, 9);
    assert_eq!(ablate(&f, "width", "a"), 2);
}

#[test]
fn verify_grad_suite_runs_only_gradient_checks() {
    let out = bin(&["verify", "--suite", "grad"], &[]);
    assert_eq!(out.status.code(), Some(0));
    let reports: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!reports.is_empty());
    for r in &reports {
        assert!(r["check"].as_str().unwrap().starts_with("grad."), "{r}");
        assert_eq!(r["pass"], true);
    }
}

#[test]
fn verify_all_passes_and_writes_reports() {
    let f = Fixture::new();
    assert_eq!(cli(&["verify", "--out", &f.s("v")]), 0);
    let text = fs::read_to_string(f.path("v/verify.json")).unwrap();
    let reports: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    for prefix in ["grad.", "quant.", "stats.", "metrics."] {
        assert!(reports.iter().any(|r| r["check"].as_str().unwrap().starts_with(prefix)));
    }
}

#[test]
fn verify_exits_one_on_a_corrupted_tolerance() {
    let f = Fixture::new();
    fs::write(f.path("tol.json"), r#"{"stats_abs": -1.0}"#).unwrap();
    let out = bin(&["verify", "--suite", "stats", "--tolerances", &f.s("tol.json")], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL stats."));
}

#[test]
fn verify_rejects_unknown_suite_and_tolerance_keys() {
    let f = Fixture::new();
    assert_eq!(cli(&["verify", "--suite", "speed"]), 2);
    fs::write(f.path("tol.json"), r#"{"grad_relative": 1.0}"#).unwrap();
    assert_eq!(cli(&["verify", "--tolerances", &f.s("tol.json")]), 2);
}

#[test]
fn missing_arguments_exit_two() {
    assert_eq!(bin(&["gen"], &[]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"], &[]).status.code(), Some(2));
}
