use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset};
use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// `N` classes per batch, `m` instances per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchLayout {
    pub classes: usize,
    pub instances: usize,
}

impl BatchLayout {
    pub fn new(classes: usize, instances: usize) -> Result<Self> {
        let l = Self { classes, instances };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(
                "layout.classes",
                "need at least 2 classes per batch so every anchor has negatives",
            ));
        }
        if self.instances < 2 {
            return Err(Error::config(
                "layout.instances",
                "need at least 2 instances per class: the interpolation interval starts at the anchor-positive distance",
            ));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes * self.instances
    }
}

/// A batch laid out as `m` groups of the same `N` classes in the same order:
/// position `i + g·N` holds instance `g` of class slot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub features: Mat,
    pub labels: Vec<ClassId>,
    /// Dataset index of each row.
    pub indices: Vec<usize>,
    pub layout: BatchLayout,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks the group-periodic label layout.
    pub fn validate(&self) -> Result<()> {
        let n = self.layout.classes;
        let b = self.layout.batch_size();
        if self.labels.len() != b || self.features.nrows() != b || self.indices.len() != b {
            return Err(Error::shape("batch", b, self.labels.len()));
        }
        for i in 0..b {
            if self.labels[i] != self.labels[i % n] {
                return Err(Error::Invalid(format!(
                    "label at {i} breaks the group order (expected {}, got {})",
                    self.labels[i % n],
                    self.labels[i]
                )));
            }
        }
        let mut first: Vec<_> = self.labels[..n].to_vec();
        first.sort_unstable();
        first.dedup();
        if first.len() != n {
            return Err(Error::Invalid(
                "class slots in a group are not distinct".into(),
            ));
        }
        Ok(())
    }

    /// Builds a batch from explicit dataset indices, already in layout order.
    pub fn from_indices(ds: &Dataset, indices: Vec<usize>, layout: BatchLayout) -> Result<Self> {
        let features = Mat::from_shape_fn((indices.len(), ds.dim()), |(r, c)| {
            ds.sample(indices[r]).features[c]
        });
        let labels = indices.iter().map(|&i| ds.sample(i).label).collect();
        let batch = Self {
            features,
            labels,
            indices,
            layout,
        };
        batch.validate()?;
        Ok(batch)
    }
}

/// Draws `N` distinct classes uniformly without replacement, in a fresh random
/// order, and `m` distinct instances of each.
pub fn sample_balanced(
    ds: &Dataset,
    layout: BatchLayout,
    rng: &mut impl Rng,
) -> Result<LabeledBatch> {
    layout.validate()?;
    let classes: Vec<(&ClassId, &Vec<usize>)> = ds.classes().iter().collect();
    if classes.len() < layout.classes {
        return Err(Error::Sampling(format!(
            "dataset has {} classes, batch needs {}",
            classes.len(),
            layout.classes
        )));
    }
    if let Some((class, idx)) = classes.iter().find(|(_, idx)| idx.len() < layout.instances) {
        return Err(Error::Sampling(format!(
            "class {class} has {} sample(s), batch needs {} per class",
            idx.len(),
            layout.instances
        )));
    }
    // `index::sample` yields a uniformly random order.
    let chosen = index::sample(rng, classes.len(), layout.classes).into_vec();
    let mut picks: Vec<Vec<usize>> = Vec::with_capacity(layout.classes);
    for &c in &chosen {
        let pool = classes[c].1;
        let inst = index::sample(rng, pool.len(), layout.instances);
        picks.push(inst.iter().map(|k| pool[k]).collect());
    }
    let mut indices = Vec::with_capacity(layout.batch_size());
    for g in 0..layout.instances {
        for slot in &picks {
            indices.push(slot[g]);
        }
    }
    LabeledBatch::from_indices(ds, indices, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{make_synthetic, LabeledSample, SyntheticDatasetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn dataset(classes: u32, per: usize) -> Dataset {
        make_synthetic(&SyntheticDatasetSpec {
            num_classes: classes,
            samples_per_class: per,
            input_dim: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn group_order_is_consistent() {
        let ds = dataset(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_balanced(&ds, BatchLayout::new(3, 2).unwrap(), &mut rng).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.labels[..3], b.labels[3..]);
        let mut idx = b.indices.clone();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 6);
    }

    #[test]
    fn single_instance_is_refused() {
        assert!(BatchLayout::new(3, 1).is_err());
        let ds = dataset(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = BatchLayout {
            classes: 3,
            instances: 1,
        };
        assert!(sample_balanced(&ds, bad, &mut rng).is_err());
    }

    #[test]
    fn deficient_class_is_named() {
        let mut samples = dataset(3, 4).samples().to_vec();
        samples.push(LabeledSample {
            features: vec![0.0; 3],
            label: 4,
        });
        let ds = Dataset::new(samples).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_balanced(&ds, BatchLayout::new(2, 2).unwrap(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("class 4"), "{err}");
        let err =
            sample_balanced(&dataset(3, 4), BatchLayout::new(4, 2).unwrap(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("3 classes"), "{err}");
    }

    #[test]
    fn class_selection_is_uniform() {
        // Each of 4 classes should appear in half of the N=2 draws.
        let ds = dataset(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let b = sample_balanced(&ds, BatchLayout::new(2, 2).unwrap(), &mut rng).unwrap();
            for &l in &b.labels[..2] {
                counts[(l - 1) as usize] += 1;
            }
        }
        let expected = draws as f64 / 2.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
        assert!(
            chi2 < critical,
            "chi2 {chi2} >= {critical}, counts {counts:?}"
        );
    }

    #[test]
    fn class_positions_are_unbiased() {
        let ds = dataset(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut first_slot = [0usize; 3];
        for _ in 0..3000 {
            let b = sample_balanced(&ds, BatchLayout::new(3, 2).unwrap(), &mut rng).unwrap();
            first_slot[(b.labels[0] - 1) as usize] += 1;
        }
        for c in first_slot {
            assert!((800..1200).contains(&c), "{first_slot:?}");
        }
    }
}
