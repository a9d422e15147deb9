//! Output directories, the run manifest and file writers.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const STEPLOG: &str = "steplog.ndjson";
pub const SPLIT: &str = "split.json";

/// Entries a command may own inside an output directory; `--force` removes
/// only these.
const OWNED_DIRS: [&str; 5] = ["ckpt", "reports", "csv", "cells", "prior"];
const OWNED_FILES: [&str; 5] = [MANIFEST, CONFIG, STEPLOG, SPLIT, "verify.json"];
const OWNED_EXT: &str = "a3pc";

/// Provenance of one command invocation. Timestamps are the only bytes that
/// differ between reruns; set `SOURCE_DATE_EPOCH` to pin them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: Option<String>,
    pub code_version: String,
    pub seed: Option<u64>,
    /// Every file below the output directory, relative and sorted.
    pub layout: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return v;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_empty_dir(dir: &Path) -> Result<bool, CliError> {
    Ok(fs::read_dir(dir).map_err(io_err(dir))?.next().is_none())
}

/// Creates `dir`, refusing a non-empty one unless `force`, in which case
/// previous outputs are removed first. Foreign files are never touched.
pub fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        if !is_empty_dir(dir)? {
            if !force {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty (pass --force to overwrite)",
                    dir.display()
                )));
            }
            clear_owned(dir)?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn clear_owned(dir: &Path) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if path.is_dir() && OWNED_DIRS.contains(&name) {
            fs::remove_dir_all(&path).map_err(io_err(&path))?;
        } else if path.is_file()
            && (OWNED_FILES.contains(&name) || path.extension().is_some_and(|e| e == OWNED_EXT))
        {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

pub fn subdir(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    fs::create_dir_all(&p).map_err(io_err(&p))?;
    Ok(p)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Writes `dir/manifest.json` listing everything already in `dir`.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    args: &[String],
    config_hash: Option<String>,
    seed: Option<u64>,
    started_unix: u64,
) -> Result<RunManifest, CliError> {
    let mut layout = Vec::new();
    walk(dir, dir, &mut layout)?;
    layout.retain(|p| p != MANIFEST);
    layout.push(MANIFEST.to_string());
    layout.sort();
    let m = RunManifest {
        command: command.to_string(),
        args: args.to_vec(),
        config_hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        layout,
        started_unix,
        finished_unix: now_unix(),
    };
    write_json(&dir.join(MANIFEST), &m)?;
    Ok(m)
}
