//! Run configuration: dataset, training and evaluation settings in one JSON
//! document. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datakit::{load_features, make_synthetic, Dataset, FeatureFormat, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// The bundled desk-scale synthetic run.
pub const BUNDLED_SYNTHETIC: &str = include_str!("../../../configs/synthetic.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Feature file to train on; the synthetic generator is used when absent.
    pub features: Option<PathBuf>,
    pub format: FeatureFormat,
    pub synthetic: SyntheticDatasetSpec,
    /// Per-class fraction held out for validation.
    pub holdout_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            features: None,
            format: FeatureFormat::Csv,
            synthetic: SyntheticDatasetSpec::default(),
            holdout_fraction: 0.2,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match &self.features {
            Some(p) => load_features(p, self.format),
            None => make_synthetic(&self.synthetic),
        }
    }

    /// `(train, held-out)`.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        self.load()?
            .split_holdout(self.holdout_fraction, self.split_seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Early stopping on held-out R@K for the first K.
    pub patience: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            patience: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn bundled_synthetic() -> Self {
        Self::from_json(BUNDLED_SYNTHETIC).expect("bundled config parses")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.features.is_none() {
            self.data.synthetic.validate()?;
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(Error::config("data.holdout_fraction", "must be in (0, 1)"));
        }
        if self.eval.ks.is_empty() {
            return Err(Error::config("eval.ks", "needs at least one K"));
        }
        if self.eval.ks.contains(&0) {
            return Err(Error::config("eval.ks", "K must be at least 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
