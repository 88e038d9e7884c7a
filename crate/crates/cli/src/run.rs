//! Config resolution, run directories and report writing shared by the
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hng_core::trainer::{EpochRecord, Manifest};
use hng_core::{MetricReport, RunConfig};

use crate::Global;

pub const DEFAULT_OUT_DIR: &str = "runs";

pub fn out_root(g: &Global) -> PathBuf {
    g.out_dir.clone().unwrap_or_else(|| DEFAULT_OUT_DIR.into())
}

/// Compiled defaults overlaid with the `--config` file, if any.
pub fn base_config(g: &Global) -> Result<RunConfig> {
    Ok(match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    })
}

/// Defaults < file < `--seed`. Command flags are applied by the caller.
pub fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = base_config(g)?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// `<arm>-<config hash prefix>-seed<seed>`; the hash covers the whole
/// resolved config, seed included.
pub fn run_dir_name(cfg: &RunConfig) -> String {
    format!(
        "{}-{}-seed{}",
        cfg.train.ablation,
        &cfg.hash()[..12],
        cfg.train.seed
    )
}

/// The run directory of a checkpoint laid out as `<run>/checkpoints/<epoch>`.
pub fn run_dir_of(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    if parent.file_name()? != "checkpoints" {
        return None;
    }
    parent.parent().map(Path::to_path_buf)
}

/// Run config for a checkpoint: `--config` if given, else the `config.json`
/// of its run directory. Warns when it does not match the manifest.
pub fn checkpoint_config(g: &Global, checkpoint: &Path, manifest: &Manifest) -> Result<RunConfig> {
    let cfg = match (&g.config, run_dir_of(checkpoint)) {
        (Some(p), _) => RunConfig::from_file(p)?,
        (None, Some(run)) if run.join("config.json").is_file() => {
            RunConfig::from_file(&run.join("config.json"))?
        }
        _ => bail!(
            "no run config found next to {}; pass --config",
            checkpoint.display()
        ),
    };
    if !manifest.matches_config(&cfg.train) {
        log::warn!(
            "training config does not match the checkpoint manifest (hash {}); the checkpoint's own config is used for the model",
            &manifest.config_hash[..12]
        );
    }
    Ok(cfg)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Comma-separated rows under a header line.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn metric_columns(ks: &[usize]) -> Vec<String> {
    ks.iter()
        .map(|k| format!("recall@{k}"))
        .chain(["r_precision".to_string(), "map_at_r".to_string()])
        .collect()
}

/// Values aligned with [`metric_columns`]; a K the report lacks is NaN.
pub fn metric_values(r: &MetricReport, ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| r.recall(k).unwrap_or(f64::NAN))
        .chain([r.r_precision, r.map_at_r])
        .collect()
}

pub fn format_record(rec: &EpochRecord) -> String {
    let mut line = format!("epoch {:>3}  J_r {:.4}", rec.epoch, rec.mean_j_r);
    if let Some(eta) = rec.eta {
        line.push_str(&format!("  eta {eta:.4}"));
    }
    if let Some(v) = &rec.validation {
        for (k, r) in &v.recall_at {
            line.push_str(&format!("  R@{k} {r:.4}"));
        }
        line.push_str(&format!(
            "  RP {:.4}  MAP@R {:.4}",
            v.r_precision, v.map_at_r
        ));
    }
    line
}
