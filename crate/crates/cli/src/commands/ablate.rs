//! Arms × seeds sweep.
//!
//! `ablation.csv` has one row per arm with the mean and sample standard
//! deviation over seeds of the final held-out metrics:
//!
//! ```text
//! arm,seeds,recall@1_mean,recall@1_std,...,r_precision_mean,r_precision_std,map_at_r_mean,map_at_r_std
//! ```
//!
//! with one `recall@K` pair per configured K. `ablation_runs.csv` lists every
//! run: `arm,seed,run_dir,recall@1,...,r_precision,map_at_r`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use clap::Args;
use hng_core::trainer::EpochRecord;
use hng_core::{Ablation, MetricReport, RunConfig};

use super::train::train_run;
use crate::run::{
    metric_columns, metric_values, out_root, resolve_config, run_dir_name, write_csv,
};
use crate::Global;

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated arms; all arms by default.
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<Ablation>>,
    /// Seeds per arm, counting up from the configured seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train all runs concurrently, one thread each.
    #[arg(long)]
    pub parallel: bool,
}

pub fn summary_header(ks: &[usize]) -> Vec<String> {
    let mut h = vec!["arm".to_string(), "seeds".to_string()];
    for c in metric_columns(ks) {
        h.push(format!("{c}_mean"));
        h.push(format!("{c}_std"));
    }
    h
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Job {
    arm: Ablation,
    cfg: RunConfig,
}

struct Done {
    arm: Ablation,
    seed: u64,
    dir: PathBuf,
    report: MetricReport,
}

fn final_report(history: &[EpochRecord]) -> Result<MetricReport> {
    history
        .last()
        .and_then(|r| r.validation.clone())
        .ok_or_else(|| anyhow!("run produced no held-out metrics; set epochs to at least 1"))
}

fn execute(job: &Job, root: &Path) -> Result<Done> {
    let dir = root.join(run_dir_name(&job.cfg));
    let history = match std::fs::read_to_string(dir.join("metrics.json")) {
        Ok(text) => {
            log::info!("reusing finished run {}", dir.display());
            serde_json::from_str(&text)?
        }
        Err(_) => train_run(&job.cfg, root, true, false)?.1,
    };
    Ok(Done {
        arm: job.arm,
        seed: job.cfg.train.seed,
        dir,
        report: final_report(&history)?,
    })
}

pub fn run(g: &Global, a: &AblateArgs) -> Result<()> {
    let mut base = resolve_config(g)?;
    if let Some(e) = a.epochs {
        base.train.epochs = e;
    }
    if a.seeds == 0 {
        return Err(hng_core::Error::config("seeds", "must be at least 1").into());
    }
    let arms = a.arms.clone().unwrap_or_else(|| Ablation::ALL.to_vec());
    let root = out_root(g);
    let first_seed = base.train.seed;
    let mut jobs = Vec::new();
    for &arm in &arms {
        for s in 0..a.seeds {
            let mut cfg = base.clone();
            cfg.train.ablation = arm;
            cfg.train.seed = first_seed + s;
            cfg.validate()?;
            jobs.push(Job { arm, cfg });
        }
    }

    let done: Vec<Done> = if a.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|j| scope.spawn(|| execute(j, &root)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| anyhow!("training thread panicked"))?)
                .collect::<Result<_>>()
        })?
    } else {
        jobs.iter()
            .map(|j| execute(j, &root))
            .collect::<Result<_>>()?
    };

    let ks = &base.eval.ks;
    let mut run_header = vec!["arm".to_string(), "seed".to_string(), "run_dir".to_string()];
    run_header.extend(metric_columns(ks));
    let run_rows: Vec<Vec<String>> = done
        .iter()
        .map(|d| {
            let mut row = vec![
                d.arm.to_string(),
                d.seed.to_string(),
                d.dir.display().to_string(),
            ];
            row.extend(metric_values(&d.report, ks).iter().map(f64::to_string));
            row
        })
        .collect();
    write_csv(&root.join("ablation_runs.csv"), &run_header, &run_rows)?;

    let mut rows = Vec::new();
    for &arm in &arms {
        let per_seed: Vec<Vec<f64>> = done
            .iter()
            .filter(|d| d.arm == arm)
            .map(|d| metric_values(&d.report, ks))
            .collect();
        let stats: Vec<(f64, f64)> = (0..metric_columns(ks).len())
            .map(|c| mean_std(&per_seed.iter().map(|v| v[c]).collect::<Vec<_>>()))
            .collect();
        println!(
            "{:<13} R@{} {:.4} ± {:.4}",
            arm.name(),
            ks[0],
            stats[0].0,
            stats[0].1
        );
        let mut row = vec![arm.to_string(), per_seed.len().to_string()];
        for (m, s) in stats {
            row.push(m.to_string());
            row.push(s.to_string());
        }
        rows.push(row);
    }
    let table = root.join("ablation.csv");
    write_csv(&table, &summary_header(ks), &rows)?;
    println!("table written to {}", table.display());
    Ok(())
}
