//! Labeled datasets: synthetic generation, feature-file ingestion and
//! balanced `N × m` batch assembly.

mod io;
mod sampler;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub use io::{load_features, write_features, FeatureFormat, BINARY_MAGIC, BINARY_VERSION};
pub use sampler::{sample_balanced, BatchLayout, LabeledBatch};

/// Class ids are `1..=C`.
pub type ClassId = u32;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: ClassId,
}

/// Immutable collection of samples with a uniform feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    dim: usize,
    num_classes: u32,
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl Dataset {
    /// Class count is the largest label present.
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self> {
        let max = samples.iter().map(|s| s.label).max().unwrap_or(0);
        Self::with_classes(samples, max)
    }

    pub fn with_classes(samples: Vec<LabeledSample>, num_classes: u32) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Invalid("dataset has no samples".into()))?;
        let dim = first.features.len();
        if dim == 0 {
            return Err(Error::Invalid("samples have zero features".into()));
        }
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::shape(
                    format!("sample {i}"),
                    format!("{dim} features"),
                    format!("{} features", s.features.len()),
                ));
            }
            if s.label == 0 || s.label > num_classes {
                return Err(Error::Invalid(format!(
                    "sample {i} has label {} outside 1..={num_classes}",
                    s.label
                )));
            }
            by_class.entry(s.label).or_default().push(i);
        }
        Ok(Self {
            samples,
            dim,
            num_classes,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &LabeledSample {
        &self.samples[i]
    }

    /// Sample indices per class present, in ascending class order.
    pub fn classes(&self) -> &BTreeMap<ClassId, Vec<usize>> {
        &self.by_class
    }

    pub fn labels(&self) -> Vec<ClassId> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// All features as an `n × dim` matrix.
    pub fn feature_matrix(&self) -> Mat {
        Mat::from_shape_fn((self.len(), self.dim), |(r, c)| self.samples[r].features[c])
    }

    /// Deterministic per-class split: `holdout` of each class (at least one
    /// sample, leaving at least one) goes to the second set.
    pub fn split_holdout(&self, holdout: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout) || holdout == 0.0 {
            return Err(Error::config("holdout_fraction", "must be in (0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (&class, idx) in &self.by_class {
            if idx.len() < 2 {
                return Err(Error::Sampling(format!(
                    "class {class} has {} sample(s); a holdout split needs 2",
                    idx.len()
                )));
            }
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let n_test = ((idx.len() as f64 * holdout).round() as usize).clamp(1, idx.len() - 1);
            let (te, tr) = idx.split_at(n_test);
            let mut te = te.to_vec();
            let mut tr = tr.to_vec();
            te.sort_unstable();
            tr.sort_unstable();
            test.extend(te.into_iter().map(|i| self.samples[i].clone()));
            train.extend(tr.into_iter().map(|i| self.samples[i].clone()));
        }
        Ok((
            Dataset::with_classes(train, self.num_classes)?,
            Dataset::with_classes(test, self.num_classes)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub num_classes: u32,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub class_center_scale: f64,
    pub within_class_stddev: f64,
    pub overlap_factor: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            samples_per_class: 50,
            input_dim: 64,
            class_center_scale: 4.0,
            within_class_stddev: 1.0,
            overlap_factor: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config(
                "samples_per_class",
                "must be at least 2: every anchor needs a same-class positive",
            ));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if !(self.within_class_stddev > 0.0 && self.within_class_stddev.is_finite()) {
            return Err(Error::config(
                "within_class_stddev",
                "must be a positive number",
            ));
        }
        if !(self.class_center_scale > 0.0 && self.class_center_scale.is_finite()) {
            return Err(Error::config(
                "class_center_scale",
                "must be a positive number",
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_factor) {
            return Err(Error::config("overlap_factor", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Class centers: uniform on the sphere of radius `class_center_scale`, then
/// pulled toward their centroid by `overlap_factor`.
pub fn synthetic_centers(spec: &SyntheticDatasetSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(centers_from(spec, &mut rng))
}

fn centers_from(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let mut v = gaussian_vec(spec.input_dim, rng);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut()
                .for_each(|x| *x *= spec.class_center_scale / norm);
            v
        })
        .collect();
    let k = centers.len() as f64;
    let centroid: Vec<f64> = (0..spec.input_dim)
        .map(|d| centers.iter().map(|c| c[d]).sum::<f64>() / k)
        .collect();
    let keep = 1.0 - spec.overlap_factor;
    for c in &mut centers {
        for (x, m) in c.iter_mut().zip(&centroid) {
            *x = m + keep * (*x - m);
        }
    }
    centers
}

/// Gaussian blobs around the synthetic centers, labels `1..=C`, class-major.
pub fn make_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = centers_from(spec, &mut rng);
    let mut samples = Vec::with_capacity(centers.len() * spec.samples_per_class);
    for (ci, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let noise = gaussian_vec(spec.input_dim, &mut rng);
            let features = center
                .iter()
                .zip(noise)
                .map(|(c, n)| c + spec.within_class_stddev * n)
                .collect();
            samples.push(LabeledSample {
                features,
                label: ci as ClassId + 1,
            });
        }
    }
    Dataset::with_classes(samples, spec.num_classes)
}
