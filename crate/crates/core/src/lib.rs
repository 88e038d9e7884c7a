//! Deep metric learning with correlation-aware hard negative generation.
//!
//! A graph network over the batch learns channel-wise interpolation
//! coefficients; hard negatives are synthesized from them and folded back
//! into the metric objective alongside a node classification term.

pub mod autodiff;
pub mod backbone;
pub mod cacai;
pub mod config;
pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod gcl;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod trainer;

pub use autodiff::{Mat, Tape, Var};
pub use backbone::{Backbone, BackboneConfig, BackboneKind, EmbeddingBatch};
pub use cacai::{InterpolationContext, InterpolationVectors, SyntheticNegatives};
pub use config::{DataConfig, EvalConfig, RunConfig};
pub use datakit::{
    BatchLayout, ClassId, Dataset, FeatureFormat, LabeledBatch, SyntheticDatasetSpec,
};
pub use error::{Error, Result};
pub use evalkit::{MetricReport, RetrievalIndex};
pub use gcl::{CorrelationGraph, GraphNet, GraphNetConfig};
pub use losses::{LossReport, MetricLossKind};
pub use trainer::{fit, Ablation, FitOptions, FitOutcome, Model, RunState, TrainConfig};
