use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use hng_core::datakit::load_features;
use hng_core::evalkit::evaluate;
use hng_core::trainer::load_checkpoint;
use hng_core::{Dataset, FeatureFormat, Model, RetrievalIndex};
use serde_json::json;

use crate::run::{
    checkpoint_config, metric_columns, metric_values, run_dir_of, write_csv, write_text,
};
use crate::Global;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// The validation split of the run config.
    Holdout,
    Train,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory (one `epoch_NNN` directory).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate this feature file in single-set mode.
    #[arg(long, conflicts_with_all = ["query", "gallery", "split"])]
    pub features: Option<PathBuf>,
    /// Query feature file; needs `--gallery`.
    #[arg(long, requires = "gallery")]
    pub query: Option<PathBuf>,
    #[arg(long, requires = "query")]
    pub gallery: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    pub format: FeatureFormat,
    /// Split of the configured data, when no feature file is given.
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// Recall cutoffs; defaults to `eval.ks` of the run config.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

fn embed(model: &Model, ds: &Dataset) -> Result<hng_core::Mat> {
    Ok(model.embed(&ds.feature_matrix())?)
}

/// Report directory: `--out-dir`, else the run directory, else the
/// checkpoint's own directory.
fn report_dir(g: &Global, checkpoint: &Path) -> PathBuf {
    g.out_dir
        .clone()
        .or_else(|| run_dir_of(checkpoint))
        .unwrap_or_else(|| checkpoint.to_path_buf())
}

pub fn run(g: &Global, a: &EvalArgs) -> Result<()> {
    let (manifest, model) = load_checkpoint(&a.checkpoint)?;
    let needs_config = a.features.is_none() && a.query.is_none();
    let run_cfg = if needs_config || a.ks.is_none() {
        Some(checkpoint_config(g, &a.checkpoint, &manifest)?)
    } else {
        None
    };
    let ks = match (&a.ks, &run_cfg) {
        (Some(ks), _) => ks.clone(),
        (None, Some(c)) => c.eval.ks.clone(),
        (None, None) => unreachable!("config is loaded when --ks is absent"),
    };
    if ks.is_empty() {
        bail!(hng_core::Error::config("ks", "needs at least one K"));
    }

    let (mode, source, index) = match (&a.features, &a.query, &a.gallery) {
        (Some(f), _, _) => {
            let ds = load_features(f, a.format)?;
            let idx = RetrievalIndex::single_set(&embed(&model, &ds)?, &ds.labels())?;
            ("single_set", f.display().to_string(), idx)
        }
        (None, Some(q), Some(gal)) => {
            let qd = load_features(q, a.format)?;
            let gd = load_features(gal, a.format)?;
            let idx = RetrievalIndex::query_gallery(
                &embed(&model, &qd)?,
                &qd.labels(),
                &embed(&model, &gd)?,
                &gd.labels(),
            )?;
            let source = format!("{} vs {}", q.display(), gal.display());
            ("query_gallery", source, idx)
        }
        _ => {
            let cfg = run_cfg.as_ref().expect("config loaded for configured data");
            let split = a.split.unwrap_or(Split::Holdout);
            let ds = match split {
                Split::Holdout => cfg.data.load_split()?.1,
                Split::Train => cfg.data.load_split()?.0,
                Split::All => cfg.data.load()?,
            };
            let idx = RetrievalIndex::single_set(&embed(&model, &ds)?, &ds.labels())?;
            let name = format!("{split:?}").to_lowercase();
            ("single_set", format!("configured data, {name} split"), idx)
        }
    };
    let report = evaluate(&index, &ks)?;

    let stem = a
        .checkpoint
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let dir = report_dir(g, &a.checkpoint);
    let doc = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "epoch": manifest.epoch,
        "ablation": manifest.config.ablation,
        "config_hash": manifest.config_hash,
        "mode": mode,
        "data": source,
        "report": report,
    });
    let json_path = dir.join(format!("eval_{stem}.json"));
    write_text(&json_path, &serde_json::to_string_pretty(&doc)?)?;

    let mut header: Vec<String> = ["checkpoint", "epoch", "mode", "n_queries"]
        .map(String::from)
        .to_vec();
    header.extend(metric_columns(&ks));
    let mut row = vec![
        a.checkpoint.display().to_string(),
        manifest.epoch.to_string(),
        mode.to_string(),
        report.n_queries.to_string(),
    ];
    row.extend(metric_values(&report, &ks).iter().map(f64::to_string));
    let csv_path = dir.join(format!("eval_{stem}.csv"));
    write_csv(&csv_path, &header, &[row])?;

    for (k, r) in &report.recall_at {
        println!("R@{k}\t{r:.4}");
    }
    println!("RP\t{:.4}", report.r_precision);
    println!("MAP@R\t{:.4}", report.map_at_r);
    log::info!(
        "reports written to {} and {}",
        json_path.display(),
        csv_path.display()
    );
    Ok(())
}
