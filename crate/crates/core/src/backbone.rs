//! Feature extractor `F`: a small MLP (or identity over precomputed
//! features) followed by a linear embedding layer and row L2 normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::datakit::{BatchLayout, ClassId, LabeledBatch};
use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub normalize: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Mlp,
            hidden_dims: vec![128],
            embed_dim: 64,
            normalize: true,
        }
    }
}

impl BackboneConfig {
    /// 512-d embedding head as used with the large CNN backbones.
    pub fn wide_512() -> Self {
        Self {
            hidden_dims: vec![1024],
            embed_dim: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::config("backbone.embed_dim", "must be at least 2"));
        }
        match self.kind {
            BackboneKind::Mlp if self.hidden_dims.is_empty() => Err(Error::config(
                "backbone.hidden_dims",
                "an mlp backbone needs at least one hidden layer",
            )),
            BackboneKind::Mlp if self.hidden_dims.contains(&0) => Err(Error::config(
                "backbone.hidden_dims",
                "layer widths must be positive",
            )),
            BackboneKind::Identity if self.embed_dim != input_dim => Err(Error::config(
                "backbone.embed_dim",
                format!("identity backbone needs embed_dim == input dim ({input_dim})"),
            )),
            _ => Ok(()),
        }
    }
}

/// Embeddings for one batch. Rows are unit-norm when normalization is on.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub z: Mat,
    pub labels: Vec<ClassId>,
    pub layout: BatchLayout,
}

impl EmbeddingBatch {
    pub fn new(z: Mat, labels: Vec<ClassId>, layout: BatchLayout) -> Result<Self> {
        if z.nrows() != labels.len() {
            return Err(Error::shape("embedding batch", labels.len(), z.nrows()));
        }
        Ok(Self { z, labels, layout })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    input_dim: usize,
    /// Hidden layers then the embedding layer; empty for identity.
    layers: Vec<Linear>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(input_dim)?;
        let mut layers = Vec::new();
        if cfg.kind == BackboneKind::Mlp {
            let mut width = input_dim;
            for (i, &h) in cfg.hidden_dims.iter().enumerate() {
                layers.push(Linear::new(&format!("backbone.hidden{i}"), width, h, rng));
                width = h;
            }
            layers.push(Linear::new("backbone.embed", width, cfg.embed_dim, rng));
        }
        Ok(Self {
            cfg,
            input_dim,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    /// Records `z = F(x)` on a tape.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let (_, d) = t.shape(x);
        if d != self.input_dim {
            return Err(Error::shape("backbone input", self.input_dim, d));
        }
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(t, h);
            if i < last {
                h = t.gelu(h);
            }
        }
        if !self.cfg.normalize {
            return Ok(h);
        }
        if let Some(r) = t
            .value(h)
            .rows()
            .into_iter()
            .position(|row| row.iter().all(|&v| v == 0.0))
        {
            return Err(Error::Invalid(format!(
                "embedding row {r} is zero and cannot be normalized"
            )));
        }
        Ok(t.normalize_rows(h))
    }

    /// Deterministic inference on a feature matrix.
    pub fn embed_matrix(&self, x: &Mat) -> Result<Mat> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let z = self.forward(&mut t, xv)?;
        Ok(t.value(z).clone())
    }

    pub fn embed(&self, batch: &LabeledBatch) -> Result<EmbeddingBatch> {
        let z = self.embed_matrix(&batch.features)?;
        EmbeddingBatch::new(z, batch.labels.clone(), batch.layout)
    }
}

impl Module for Backbone {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}
