//! Diagnostic CSV dumps of one checkpoint on one batch.
//!
//! | file | columns |
//! |---|---|
//! | `attention_nodes.csv` | `step,head,row,col,row_label,col_label,weight` |
//! | `attention_edges.csv` | `step,head,i,j,weight_first` |
//! | `lambda_hist.csv` | `bin_lo,bin_hi,count` |
//! | `occupancy.csv` | `bin_lo,bin_hi,count` |
//! | `variance.csv` | `dim,mean,variance` |
//! | `variance_hist.csv` | `bin_lo,bin_hi,count` |
//! | `projection.csv` | `index,label,pc1,pc2` |
//! | `summary.json` | batch, `η`, pair counts, variance quantiles |
//!
//! Node attention weights on masked columns (self and same class) are
//! written as exact zeros. `weight_first` is the weight an edge query puts on
//! its first endpoint. Coefficients are histogrammed over every
//! different-class pair of the batch; occupancy is the position of each
//! interpolated negative inside `[d⁺, d⁻]`, as a fraction of the interval.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use hng_core::cacai::{interpolate_pair, pair_distances, InterpolationContext};
use hng_core::datakit::sample_balanced;
use hng_core::evalkit::{embedding_stats, project_2d};
use hng_core::trainer::{load_checkpoint, plan_batch};
use hng_core::{Mat, Tape};
use ndarray::arr1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::run::{checkpoint_config, run_dir_of, write_csv, write_text};
use crate::Global;

pub const HIST_BINS: usize = 10;

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Seed of the batch draw and the synthesis plan.
    #[arg(long, default_value_t = 0)]
    pub batch_seed: u64,
    /// Interpolation strength; by default derived from the last epoch's
    /// mean metric loss, or 1 before any training.
    #[arg(long)]
    pub eta: Option<f64>,
}

/// Counts of `values` in `bins` equal bins over `[0, 1]`; 1 falls in the last.
fn unit_histogram(values: &[f64], bins: usize) -> Vec<Vec<String>> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, c)| {
            vec![
                (b as f64 / bins as f64).to_string(),
                ((b + 1) as f64 / bins as f64).to_string(),
                c.to_string(),
            ]
        })
        .collect()
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

pub fn run(g: &Global, a: &InspectArgs) -> Result<()> {
    let (manifest, model) = load_checkpoint(&a.checkpoint)?;
    let run_cfg = checkpoint_config(g, &a.checkpoint, &manifest)?;
    let cfg = &manifest.config;
    let stem = a
        .checkpoint
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let out = g
        .out_dir
        .clone()
        .or_else(|| run_dir_of(&a.checkpoint))
        .unwrap_or_else(|| a.checkpoint.clone())
        .join(format!("inspect_{stem}"));

    let (train, held_out) = run_cfg.data.load_split()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.batch_seed);
    let batch = sample_balanced(&train, cfg.layout, &mut rng)?;
    let labels = &batch.labels;
    let b = labels.len();
    let z = model.embed(&batch.features)?;
    let eta = a
        .eta
        .unwrap_or_else(|| match manifest.metric_history.last() {
            Some(r) => InterpolationContext::new(cfg.alpha_pull, r.mean_j_r).eta,
            None => 1.0,
        });

    let mut summary = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "epoch": manifest.epoch,
        "ablation": cfg.ablation,
        "batch_seed": a.batch_seed,
        "batch_indices": batch.indices,
        "eta": eta,
    });

    if let Some(graph) = &model.graph {
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let (gv, trace) = graph.forward(&mut t, zv, labels)?;
        let mut rows = Vec::new();
        for (step, heads) in trace.node.iter().enumerate() {
            for (h, att) in heads.iter().enumerate() {
                for ((r, c), w) in att.indexed_iter() {
                    rows.push(vec![
                        step.to_string(),
                        h.to_string(),
                        r.to_string(),
                        c.to_string(),
                        labels[r].to_string(),
                        labels[c].to_string(),
                        w.to_string(),
                    ]);
                }
            }
        }
        let cols = [
            "step",
            "head",
            "row",
            "col",
            "row_label",
            "col_label",
            "weight",
        ];
        write_csv(&out.join("attention_nodes.csv"), &header(&cols), &rows)?;
        let mut rows = Vec::new();
        for (step, att) in trace.edge.iter().enumerate() {
            for ((e, h), w) in att.indexed_iter() {
                let (i, j) = (e / b, e % b);
                rows.push(vec![
                    step.to_string(),
                    h.to_string(),
                    i.to_string(),
                    j.to_string(),
                    w.to_string(),
                ]);
            }
        }
        let cols = ["step", "head", "i", "j", "weight_first"];
        write_csv(&out.join("attention_edges.csv"), &header(&cols), &rows)?;

        if cfg.ablation.uses_hng() {
            let edges: Mat = t.value(gv.edges).clone();
            let lambda = model
                .lambda_head
                .as_ref()
                .map(|h| h.compute_lambda(&edges))
                .transpose()?;
            let mut coeffs = Vec::new();
            if let Some(l) = &lambda {
                for i in 0..b {
                    for j in (0..b).filter(|&j| labels[j] != labels[i]) {
                        coeffs.extend(l.get(i, j).iter().copied());
                    }
                }
            }
            write_csv(
                &out.join("lambda_hist.csv"),
                &header(&["bin_lo", "bin_hi", "count"]),
                &unit_histogram(&coeffs, HIST_BINS),
            )?;

            let plan = plan_batch(cfg, &z, labels, &mut rng)?;
            let (dp, dm) = pair_distances(&z, &plan.positives);
            let ones = arr1(&[1.0]);
            let mut occupancy = Vec::new();
            for &(i, j) in &plan.pairs[..plan.far] {
                let lam = match &lambda {
                    Some(l) => l.get(i, j),
                    None => ones.view(),
                };
                let zt = interpolate_pair(z.row(i), z.row(j), lam, dp[i], dm[[i, j]], eta);
                let moved = (&zt - &z.row(i)).mapv(|v| v * v).sum().sqrt();
                occupancy.push((moved - dp[i]) / (dm[[i, j]] - dp[i]));
            }
            write_csv(
                &out.join("occupancy.csv"),
                &header(&["bin_lo", "bin_hi", "count"]),
                &unit_histogram(&occupancy, HIST_BINS),
            )?;
            summary["far_pairs"] = json!(plan.far);
            summary["near_pairs"] = json!(plan.pairs.len() - plan.far);
            summary["lambda_values"] = json!(coeffs.len());
            let (lo, hi) = coeffs
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if !coeffs.is_empty() {
                summary["lambda_min"] = json!(lo);
                summary["lambda_max"] = json!(hi);
            }
        }
    } else {
        log::warn!(
            "arm {} has no graph network; attention and coefficient dumps are skipped",
            cfg.ablation
        );
    }

    let emb = model.embed(&held_out.feature_matrix())?;
    let stats = embedding_stats(&emb)?;
    let rows: Vec<Vec<String>> = stats
        .mean
        .iter()
        .zip(&stats.variance)
        .enumerate()
        .map(|(d, (m, v))| vec![d.to_string(), m.to_string(), v.to_string()])
        .collect();
    write_csv(
        &out.join("variance.csv"),
        &header(&["dim", "mean", "variance"]),
        &rows,
    )?;
    let rows: Vec<Vec<String>> = stats
        .histogram_counts
        .iter()
        .enumerate()
        .map(|(k, c)| {
            vec![
                stats.histogram_edges[k].to_string(),
                stats.histogram_edges[k + 1].to_string(),
                c.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("variance_hist.csv"),
        &header(&["bin_lo", "bin_hi", "count"]),
        &rows,
    )?;
    summary["variance_quantiles"] = json!(stats.quantiles);
    let norms: f64 = emb.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum();
    summary["mean_row_norm"] = json!(norms / emb.nrows() as f64);

    let proj = project_2d(&emb)?;
    let rows: Vec<Vec<String>> = held_out
        .labels()
        .iter()
        .enumerate()
        .map(|(r, l)| {
            vec![
                r.to_string(),
                l.to_string(),
                proj.coords[[r, 0]].to_string(),
                proj.coords[[r, 1]].to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("projection.csv"),
        &header(&["index", "label", "pc1", "pc2"]),
        &rows,
    )?;
    write_text(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    println!("diagnostics written to {}", out.display());
    Ok(())
}
