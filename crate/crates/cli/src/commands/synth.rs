use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use hng_core::datakit::{make_synthetic, write_features};
use hng_core::FeatureFormat;

use crate::run::base_config;
use crate::Global;

/// Unset flags fall back to `data.synthetic` of the run config.
#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: Option<u32>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Radius of the sphere the class centers are drawn on.
    #[arg(long)]
    pub center_scale: Option<f64>,
    #[arg(long)]
    pub stddev: Option<f64>,
    /// Contraction of the centers toward their centroid, in [0, 1].
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long, default_value = "csv")]
    pub format: FeatureFormat,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(g: &Global, a: &SynthArgs) -> Result<()> {
    let mut spec = base_config(g)?.data.synthetic;
    if let Some(v) = a.classes {
        spec.num_classes = v;
    }
    if let Some(v) = a.per_class {
        spec.samples_per_class = v;
    }
    if let Some(v) = a.dim {
        spec.input_dim = v;
    }
    if let Some(v) = a.center_scale {
        spec.class_center_scale = v;
    }
    if let Some(v) = a.stddev {
        spec.within_class_stddev = v;
    }
    if let Some(v) = a.overlap {
        spec.overlap_factor = v;
    }
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let ds = make_synthetic(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_features(&ds, &a.out, a.format)?;
    log::info!(
        "wrote {} records ({} classes, dim {}) to {}",
        ds.len(),
        ds.num_classes(),
        ds.dim(),
        a.out.display()
    );
    Ok(())
}
