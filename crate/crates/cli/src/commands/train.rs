use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use hng_core::trainer::EpochRecord;
use hng_core::{fit, Ablation, FeatureFormat, FitOptions, MetricLossKind, RunConfig};

use crate::run::{format_record, out_root, resolve_config, run_dir_name, write_text};
use crate::Global;

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training arm: full, single_coeff, no_global, no_hadamard, no_rw,
    /// baseline or baseline_gnn.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// np_modified or proxy_anchor.
    #[arg(long)]
    pub metric_loss: Option<MetricLossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train on this feature file instead of the configured data.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<FeatureFormat>,
    /// Train even if the run directory already holds a run.
    #[arg(long)]
    pub force: bool,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(a) = self.ablation {
            cfg.train.ablation = a;
        }
        if let Some(m) = self.metric_loss {
            cfg.train.metric_loss = m;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(f) = &self.features {
            cfg.data.features = Some(f.clone());
        }
        if let Some(f) = self.format {
            cfg.data.format = f;
        }
    }
}

fn print_record(rec: &EpochRecord) {
    println!("{}", format_record(rec));
}

/// Trains `cfg` in its content-addressed run directory under `root`.
/// Returns the directory and the per-epoch records.
pub fn train_run(
    cfg: &RunConfig,
    root: &std::path::Path,
    force: bool,
    echo: bool,
) -> Result<(PathBuf, Vec<EpochRecord>)> {
    cfg.validate()?;
    let dir = root.join(run_dir_name(cfg));
    if dir.join("checkpoints").exists() && !force {
        bail!(
            "run directory {} already holds a run with this config and seed; pass --force to train again",
            dir.display()
        );
    }
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    let (train, held_out) = cfg.data.load_split()?;
    log::info!(
        "{}: {} training and {} held-out samples, {} classes",
        dir.display(),
        train.len(),
        held_out.len(),
        train.num_classes()
    );
    let opts = FitOptions {
        out_dir: Some(dir.clone()),
        eval_ks: cfg.eval.ks.clone(),
        patience: cfg.eval.patience,
        on_epoch: echo.then_some(print_record as fn(&EpochRecord)),
    };
    let out = fit(&train, Some(&held_out), &cfg.train, &opts)?;
    write_text(
        &dir.join("metrics.json"),
        &serde_json::to_string_pretty(&out.history)?,
    )?;
    Ok((dir, out.history))
}

pub fn run(g: &Global, a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(g)?;
    a.apply(&mut cfg);
    let (dir, _) = train_run(&cfg, &out_root(g), a.force, true)?;
    println!("run directory: {}", dir.display());
    Ok(())
}
