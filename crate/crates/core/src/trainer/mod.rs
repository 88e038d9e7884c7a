//! Two-stage training.
//!
//! Every iteration first trains the generator (graph network and coefficient
//! head) on the stop-gradient embeddings and the `C_z` head on the real
//! embeddings, then trains the metric model, graph network, `C_v` and proxies
//! jointly with the coefficient vectors detached.

mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::cacai::{
    pair_distances, plan_synthesis, select_positives, synthesize_on_tape, InterpolationContext,
    LambdaHead, SynthesisOptions, SynthesisPlan,
};
use crate::datakit::{sample_balanced, BatchLayout, Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricReport, RetrievalIndex};
use crate::gcl::{GraphNet, GraphNetConfig, GraphVariant};
use crate::losses::{self, ClassifierHead, LossReport, MetricLossKind, ProxyBank, Stage1Weights};
use crate::nn::{Module, Param};
use crate::optim::{cosine_decay, AdamW};

pub use checkpoint::{
    config_hash, load_checkpoint, load_into, read_manifest, save_checkpoint, GroupEntry, Manifest,
    TensorEntry, BLOB_MAGIC, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

/// Training arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    SingleCoeff,
    NoGlobal,
    NoHadamard,
    NoRw,
    Baseline,
    BaselineGnn,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Self::Full,
        Self::SingleCoeff,
        Self::NoGlobal,
        Self::NoHadamard,
        Self::NoRw,
        Self::Baseline,
        Self::BaselineGnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::SingleCoeff => "single_coeff",
            Self::NoGlobal => "no_global",
            Self::NoHadamard => "no_hadamard",
            Self::NoRw => "no_rw",
            Self::Baseline => "baseline",
            Self::BaselineGnn => "baseline_gnn",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != Self::Baseline
    }

    /// Synthesizes negatives (and so runs stage 1).
    pub fn uses_hng(self) -> bool {
        !matches!(self, Self::Baseline | Self::BaselineGnn)
    }

    pub fn learns_lambda(self) -> bool {
        self.uses_hng() && self != Self::SingleCoeff
    }

    pub fn graph_variant(self) -> GraphVariant {
        GraphVariant {
            node_propagation: self != Self::NoGlobal,
            edge_sum: self != Self::NoHadamard,
        }
    }

    pub fn synthesis_options(self, shuffle: bool) -> SynthesisOptions {
        SynthesisOptions {
            single_coeff: self == Self::SingleCoeff,
            random_weighting: self != Self::NoRw,
            shuffle,
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::config(
                    "ablation",
                    format!("unknown arm `{s}`; valid arms: {}", valid.join(", ")),
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batches per epoch; by default enough to cover the training set once.
    pub steps_per_epoch: Option<usize>,
    pub layout: BatchLayout,
    pub backbone: BackboneConfig,
    pub graph: GraphNetConfig,
    pub lr_f: f64,
    pub lr_g: f64,
    pub lr_cz: f64,
    pub lr_cv: f64,
    pub weight_decay: f64,
    /// `α` of the `η` schedule.
    pub alpha_pull: f64,
    /// `β` of the `γ_n` schedule.
    pub beta: f64,
    pub gamma_s: f64,
    /// Defaults by metric loss when absent.
    pub gamma_d: Option<f64>,
    pub metric_loss: MetricLossKind,
    pub pa_alpha: f64,
    pub pa_delta: f64,
    pub ablation: Ablation,
    /// Smoothing of the `J_gen` tracker behind `γ_n`.
    pub jgen_ema_decay: f64,
    pub shuffle_fusion: bool,
    /// Re-normalize synthetic negatives before the losses.
    pub normalize_synthetic: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: None,
            layout: BatchLayout {
                classes: 4,
                instances: 3,
            },
            backbone: BackboneConfig::default(),
            graph: GraphNetConfig::default(),
            lr_f: 1.5e-4,
            lr_g: 3e-4,
            lr_cz: 1e-3,
            lr_cv: 3e-4,
            weight_decay: 1e-4,
            alpha_pull: 5.0,
            beta: 2.0,
            gamma_s: 1.0,
            gamma_d: None,
            metric_loss: MetricLossKind::NpModified,
            pa_alpha: ProxyBank::DEFAULT_ALPHA,
            pa_delta: ProxyBank::DEFAULT_DELTA,
            ablation: Ablation::Full,
            jgen_ema_decay: 0.9,
            shuffle_fusion: false,
            normalize_synthetic: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn stage1_weights(&self) -> Stage1Weights {
        Stage1Weights {
            gamma_s: self.gamma_s,
            gamma_d: self
                .gamma_d
                .unwrap_or_else(|| self.metric_loss.default_gamma_d()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        for (field, v) in [
            ("lr_f", self.lr_f),
            ("lr_g", self.lr_g),
            ("lr_cz", self.lr_cz),
            ("lr_cv", self.lr_cv),
            ("alpha_pull", self.alpha_pull),
            ("beta", self.beta),
            ("pa_alpha", self.pa_alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        let w = self.stage1_weights();
        for (field, v) in [
            ("weight_decay", self.weight_decay),
            ("gamma_s", w.gamma_s),
            ("gamma_d", w.gamma_d),
            ("pa_delta", self.pa_delta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    field,
                    format!("must be nonnegative, got {v}"),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.jgen_ema_decay) {
            return Err(Error::config("jgen_ema_decay", "must lie in [0, 1)"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch", "must be positive"));
        }
        self.graph.validate(self.backbone.embed_dim)
    }
}

/// Every trainable part. Parts an arm does not use are absent.
#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub graph: Option<GraphNet>,
    pub lambda_head: Option<LambdaHead>,
    pub cz: Option<ClassifierHead>,
    pub cv: Option<ClassifierHead>,
    pub proxies: Option<ProxyBank>,
}

/// Stream of the model-initialization generator.
const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const SYNTH_STREAM: u64 = 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

impl Model {
    /// Builds all parts in a fixed order, so arms sharing a seed share the
    /// backbone initialization.
    pub fn new(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        let mut rng = stream(cfg.seed, INIT_STREAM);
        let d = cfg.backbone.embed_dim;
        let backbone = Backbone::new(cfg.backbone.clone(), input_dim, &mut rng)?;
        let mut graph = GraphNet::new(cfg.graph.clone(), d, &mut rng)?;
        graph.variant = cfg.ablation.graph_variant();
        let lambda_head = LambdaHead::new(d, &mut rng);
        let cz = ClassifierHead::new("heads.cz", d, num_classes, &mut rng);
        let cv = ClassifierHead::new("heads.cv", d, num_classes, &mut rng);
        let proxies = ProxyBank::new(num_classes, d, cfg.pa_alpha, cfg.pa_delta, &mut rng);
        let a = cfg.ablation;
        Ok(Self {
            backbone,
            graph: a.uses_graph().then_some(graph),
            lambda_head: a.learns_lambda().then_some(lambda_head),
            cz: a.uses_hng().then_some(cz),
            cv: a.uses_graph().then_some(cv),
            proxies: (cfg.metric_loss == MetricLossKind::ProxyAnchor).then_some(proxies),
        })
    }

    /// Named parameter groups, in checkpoint order; absent parts are skipped.
    pub fn groups(&self) -> Vec<(&'static str, Vec<&Param>)> {
        let mut g = vec![("backbone", self.backbone.params())];
        if let Some(x) = &self.graph {
            g.push(("gcl", x.params()));
        }
        if let Some(x) = &self.lambda_head {
            g.push(("cacai_fc", x.params()));
        }
        let heads: Vec<&Param> = self
            .cz
            .iter()
            .chain(self.cv.iter())
            .flat_map(|h| h.params())
            .collect();
        if !heads.is_empty() {
            g.push(("heads", heads));
        }
        if let Some(x) = &self.proxies {
            g.push(("proxies", x.params()));
        }
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, Vec<&mut Param>)> {
        let mut g = vec![("backbone", self.backbone.params_mut())];
        if let Some(x) = &mut self.graph {
            g.push(("gcl", x.params_mut()));
        }
        if let Some(x) = &mut self.lambda_head {
            g.push(("cacai_fc", x.params_mut()));
        }
        let heads: Vec<&mut Param> = self
            .cz
            .iter_mut()
            .chain(self.cv.iter_mut())
            .flat_map(|h| h.params_mut())
            .collect();
        if !heads.is_empty() {
            g.push(("heads", heads));
        }
        if let Some(x) = &mut self.proxies {
            g.push(("proxies", x.params_mut()));
        }
        g
    }

    pub fn group_names(&self) -> Vec<&'static str> {
        self.groups().into_iter().map(|(n, _)| n).collect()
    }

    /// Deterministic embeddings of a feature matrix.
    pub fn embed(&self, x: &Mat) -> Result<Mat> {
        self.backbone.embed_matrix(x)
    }
}

/// Schedules, trackers, random streams and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct RunState {
    pub epoch: usize,
    /// Global step.
    pub step: usize,
    pub total_steps: usize,
    /// `η` frozen for the current epoch; absent during the first epoch.
    pub eta: Option<f64>,
    /// Mean metric loss of the previous epoch.
    pub j_avg: Option<f64>,
    epoch_metric_sum: f64,
    epoch_metric_count: usize,
    /// Smoothed `J_gen`.
    pub jgen_ema: Option<f64>,
    pub data_rng: ChaCha8Rng,
    pub synth_rng: ChaCha8Rng,
    opt_f: AdamW,
    opt_g: AdamW,
    opt_cz: AdamW,
    opt_cv: AdamW,
}

impl RunState {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        Self {
            epoch: 0,
            step: 0,
            total_steps,
            eta: None,
            j_avg: None,
            epoch_metric_sum: 0.0,
            epoch_metric_count: 0,
            jgen_ema: None,
            data_rng: stream(cfg.seed, DATA_STREAM),
            synth_rng: stream(cfg.seed, SYNTH_STREAM),
            opt_f: AdamW::new(cfg.lr_f, cfg.weight_decay),
            opt_g: AdamW::new(cfg.lr_g, cfg.weight_decay),
            opt_cz: AdamW::new(cfg.lr_cz, cfg.weight_decay),
            opt_cv: AdamW::new(cfg.lr_cv, cfg.weight_decay),
        }
    }

    pub fn record_metric_loss(&mut self, j_r: f64) {
        self.epoch_metric_sum += j_r;
        self.epoch_metric_count += 1;
    }

    /// Mean metric loss so far in the current epoch.
    pub fn running_metric_mean(&self) -> Option<f64> {
        (self.epoch_metric_count > 0)
            .then(|| self.epoch_metric_sum / self.epoch_metric_count as f64)
    }

    /// `η` for the current batch: the frozen epoch value, or during the first
    /// epoch one bootstrapped from the running mean (current batch included).
    pub fn current_eta(&self, alpha_pull: f64) -> f64 {
        match self.eta {
            Some(e) => e,
            None => {
                InterpolationContext::new(alpha_pull, self.running_metric_mean().unwrap_or(0.0)).eta
            }
        }
    }

    pub fn record_jgen(&mut self, j_gen: f64, decay: f64) {
        self.jgen_ema = Some(match self.jgen_ema {
            Some(e) => decay * e + (1.0 - decay) * j_gen,
            None => j_gen,
        });
    }

    pub fn gamma_n(&self, beta: f64) -> Option<f64> {
        self.jgen_ema.map(|j| losses::gamma_n(beta, j))
    }
}

/// Epoch boundary: freezes `η` from the finished epoch's mean metric loss and
/// starts a new epoch.
pub fn update_schedules(state: &mut RunState, cfg: &TrainConfig) {
    if let Some(mean) = state.running_metric_mean() {
        let ctx = InterpolationContext::new(cfg.alpha_pull, mean);
        state.j_avg = Some(ctx.j_avg);
        state.eta = Some(ctx.eta);
    }
    state.epoch_metric_sum = 0.0;
    state.epoch_metric_count = 0;
    state.epoch += 1;
}

fn finite_or_abort(report: &LossReport) -> Result<()> {
    if let Some(term) = report.non_finite() {
        let dump = serde_json::to_string(report).unwrap_or_default();
        return Err(Error::Numeric(format!(
            "{term} is not finite at step {}: {dump}",
            report.step
        )));
    }
    Ok(())
}

fn graph_params(model: &mut Model) -> Vec<&mut Param> {
    let mut p = Vec::new();
    if let Some(g) = &mut model.graph {
        p.extend(g.params_mut());
    }
    if let Some(h) = &mut model.lambda_head {
        p.extend(h.params_mut());
    }
    p
}

/// Intermediate values of one step, for inspection.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub plan: Option<SynthesisPlan>,
    pub eta: Option<f64>,
}

/// Stage-1 tape: the generator objective on `sg(z)`. `C_z` is frozen.
pub struct Stage1 {
    pub tape: Tape,
    pub terms: losses::GenTerms,
}

/// Stage-2 tape: the joint metric objective.
pub struct Stage2 {
    pub tape: Tape,
    pub j_m: Var,
    pub j_r: Var,
    pub j_gca: Option<Var>,
    pub j_syn: Option<Var>,
    /// Detached coefficient vectors, when the arm learns them.
    pub lambda: Option<Var>,
}

/// Draws the positives and the fusion plan for one batch.
pub fn plan_batch(
    cfg: &TrainConfig,
    z: &Mat,
    labels: &[u32],
    rng: &mut ChaCha8Rng,
) -> Result<SynthesisPlan> {
    let positives = select_positives(labels, rng)?;
    let (dp, dm) = pair_distances(z, &positives);
    let opts = cfg.ablation.synthesis_options(cfg.shuffle_fusion);
    plan_synthesis(labels, positives, &dp, &dm, opts, rng)
}

pub fn stage1_objective(
    model: &Model,
    cfg: &TrainConfig,
    z_val: &Mat,
    batch: &LabeledBatch,
    plan: &SynthesisPlan,
    eta: f64,
) -> Result<Stage1> {
    let cz = model.cz.as_ref().ok_or_else(|| missing("C_z"))?;
    let graph = model
        .graph
        .as_ref()
        .ok_or_else(|| missing("graph network"))?;
    let mut t = Tape::with_frozen(cz.param_ids());
    let z = t.constant(z_val.clone());
    let (g, _) = graph.forward(&mut t, z, &batch.labels)?;
    let lam = model
        .lambda_head
        .as_ref()
        .map(|h| h.forward(&mut t, g.edges));
    let mut zh = synthesize_on_tape(&mut t, z, lam, plan, eta);
    if cfg.normalize_synthetic {
        zh = t.normalize_rows(zh);
    }
    let terms = losses::j_gen(
        &mut t,
        cz,
        z,
        zh,
        lam,
        plan,
        &batch.labels,
        batch.layout,
        cfg.stage1_weights(),
    )?;
    Ok(Stage1 { tape: t, terms })
}

/// Synthesis inputs of stage 2.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Synthesis<'a> {
    pub plan: &'a SynthesisPlan,
    pub eta: f64,
    /// Coefficient vectors to use as constants. When absent they are computed
    /// from the model and detached, which yields the same value and gradient.
    pub lambda: Option<&'a Mat>,
}

impl<'a> Stage2Synthesis<'a> {
    pub fn new(plan: &'a SynthesisPlan, eta: f64) -> Self {
        Self {
            plan,
            eta,
            lambda: None,
        }
    }
}

/// Without `synthesis` the synthetic term is left out.
pub fn stage2_objective(
    model: &Model,
    cfg: &TrainConfig,
    batch: &LabeledBatch,
    synthesis: Option<Stage2Synthesis<'_>>,
    gamma_n: f64,
) -> Result<Stage2> {
    let labels = &batch.labels;
    let mut t = Tape::new();
    let x = t.constant(batch.features.clone());
    let z = model.backbone.forward(&mut t, x)?;
    let j_r = losses::metric_loss(
        &mut t,
        cfg.metric_loss,
        z,
        labels,
        batch.layout,
        model.proxies.as_ref(),
    )?;
    let mut j_gca = None;
    let mut j_syn = None;
    let mut lambda = None;
    if let (Some(graph), Some(cv)) = (&model.graph, &model.cv) {
        let (g, _) = graph.forward(&mut t, z, labels)?;
        j_gca = Some(losses::j_gca(&mut t, cv, g.nodes, labels)?);
        if let Some(syn) = synthesis {
            lambda = match (syn.lambda, &model.lambda_head) {
                (_, None) => None,
                (Some(fixed), Some(_)) => Some(t.constant(fixed.clone())),
                (None, Some(h)) => {
                    let l = h.forward(&mut t, g.edges);
                    Some(t.detach(l))
                }
            };
            let (p, e) = (syn.plan, syn.eta);
            let mut zh = synthesize_on_tape(&mut t, z, lambda, p, e);
            if cfg.normalize_synthetic {
                zh = t.normalize_rows(zh);
            }
            j_syn = Some(losses::j_syn(&mut t, z, zh, p));
        }
    }
    let j_m = losses::j_m(&mut t, j_r, j_gca, j_syn, gamma_n);
    Ok(Stage2 {
        tape: t,
        j_m,
        j_r,
        j_gca,
        j_syn,
        lambda,
    })
}

fn missing(what: &str) -> Error {
    Error::config("ablation", format!("this arm has no {what}"))
}

/// Runs both stages on one batch.
pub fn train_step(
    model: &mut Model,
    state: &mut RunState,
    cfg: &TrainConfig,
    batch: &LabeledBatch,
) -> Result<(LossReport, StepTrace)> {
    batch.validate()?;
    let labels = &batch.labels;
    let arm = cfg.ablation;
    let mut report = LossReport {
        epoch: state.epoch,
        step: state.step,
        ..Default::default()
    };

    // z = F(x). F is unchanged until stage 2, so its metric loss is already
    // the value stage 2 will see.
    let z_val = model.backbone.embed_matrix(&batch.features)?;
    let j_r_now = {
        let mut t = Tape::new();
        let z = t.constant(z_val.clone());
        let l = losses::metric_loss(
            &mut t,
            cfg.metric_loss,
            z,
            labels,
            batch.layout,
            model.proxies.as_ref(),
        )?;
        t.scalar(l)
    };
    report.j_r = j_r_now;
    finite_or_abort(&report)?;
    state.record_metric_loss(j_r_now);
    let lr_g = cosine_decay(cfg.lr_g, state.step, state.total_steps.max(1));

    let mut plan = None;
    let mut eta = None;
    if arm.uses_hng() {
        let e = state.current_eta(cfg.alpha_pull);
        eta = Some(e);
        report.eta = Some(e);
        let p = plan_batch(cfg, &z_val, labels, &mut state.synth_rng)?;

        let Stage1 { tape: t, terms } = stage1_objective(model, cfg, &z_val, batch, &p, e)?;
        report.j_ce = Some(t.scalar(terms.j_ce));
        report.j_sim = Some(t.scalar(terms.j_sim));
        report.j_div = Some(t.scalar(terms.j_div));
        report.j_gen = Some(t.scalar(terms.j_gen));
        finite_or_abort(&report)?;
        let grads = t.backward(terms.j_gen);
        state.opt_g.step(graph_params(model), &grads, lr_g);
        state.record_jgen(t.scalar(terms.j_gen), cfg.jgen_ema_decay);

        // C_z on the real embeddings only.
        let cz = model.cz.as_mut().ok_or_else(|| missing("C_z"))?;
        let mut t = Tape::new();
        let z = t.constant(z_val.clone());
        let l = losses::j_cz(&mut t, cz, z, labels)?;
        report.j_cz = Some(t.scalar(l));
        finite_or_abort(&report)?;
        let grads = t.backward(l);
        state.opt_cz.step(cz.params_mut(), &grads, cfg.lr_cz);
        plan = Some(p);
    }

    let gamma = if plan.is_some() {
        state.gamma_n(cfg.beta)
    } else {
        None
    };
    let synthesis = plan
        .as_ref()
        .zip(eta)
        .map(|(p, e)| Stage2Synthesis::new(p, e));
    let s2 = stage2_objective(model, cfg, batch, synthesis, gamma.unwrap_or(0.0))?;
    let t = &s2.tape;
    report.j_r = t.scalar(s2.j_r);
    report.j_gca = s2.j_gca.map(|v| t.scalar(v));
    report.j_syn = s2.j_syn.map(|v| t.scalar(v));
    report.gamma_n = gamma;
    report.j_m = t.scalar(s2.j_m);
    finite_or_abort(&report)?;
    let grads = s2.tape.backward(s2.j_m);
    let mut metric: Vec<&mut Param> = model.backbone.params_mut();
    if let Some(p) = &mut model.proxies {
        metric.extend(p.params_mut());
    }
    state.opt_f.step(metric, &grads, cfg.lr_f);
    state.opt_g.step(graph_params(model), &grads, lr_g);
    if let Some(cv) = &mut model.cv {
        state.opt_cv.step(cv.params_mut(), &grads, cfg.lr_cv);
    }
    state.step += 1;
    Ok((report, StepTrace { plan, eta }))
}

/// Per-epoch summary kept in the checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_j_r: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<MetricReport>,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Checkpoints and the training log are written here when set.
    pub out_dir: Option<PathBuf>,
    pub eval_ks: Vec<usize>,
    /// Stop after this many epochs without a better validation R@1.
    pub patience: Option<usize>,
    /// Called with each finished epoch's record.
    pub on_epoch: Option<fn(&EpochRecord)>,
}

pub struct FitOutcome {
    pub model: Model,
    pub state: RunState,
    pub history: Vec<EpochRecord>,
    pub log: Vec<LossReport>,
}

/// Retrieval metrics of `model` on `ds` in single-set mode.
pub fn validate(model: &Model, ds: &Dataset, ks: &[usize]) -> Result<MetricReport> {
    let z = model.embed(&ds.feature_matrix())?;
    let index = RetrievalIndex::single_set(&z, &ds.labels())?;
    let ks: Vec<usize> = ks
        .iter()
        .copied()
        .filter(|&k| k <= index.effective_gallery())
        .collect();
    evaluate(&index, &ks)
}

/// Appends one JSON line per step, with a wall-clock `time` field.
struct LogWriter {
    file: Option<(PathBuf, std::io::BufWriter<fs::File>)>,
}

impl LogWriter {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                let path = d.join("train_log.jsonl");
                let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn write(&mut self, r: &LossReport) -> Result<()> {
        let Some((path, w)) = &mut self.file else {
            return Ok(());
        };
        let mut v = serde_json::to_value(r)?;
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        v["time"] = serde_json::json!(now);
        writeln!(w, "{v}").map_err(|e| Error::io(path.clone(), e))
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            w.flush().map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }
}

pub fn steps_per_epoch(cfg: &TrainConfig, train: &Dataset) -> usize {
    cfg.steps_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(cfg.layout.batch_size()).max(1))
}

/// Trains for `cfg.epochs` epochs of balanced batches.
pub fn fit(
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg, train.dim(), train.num_classes() as usize)?;
    let per_epoch = steps_per_epoch(cfg, train);
    let mut state = RunState::new(cfg, per_epoch * cfg.epochs);
    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut writer = LogWriter::open(opts.out_dir.as_deref())?;
    let mut history = Vec::new();
    let mut log = Vec::new();
    let ks = if opts.eval_ks.is_empty() {
        vec![1]
    } else {
        opts.eval_ks.clone()
    };

    if let Some(d) = &ckpt_dir {
        save_checkpoint(
            &d.join("epoch_000"),
            &model,
            cfg,
            train.dim(),
            train.num_classes(),
            0,
            &history,
        )?;
    }
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let eta = state.eta;
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let batch = sample_balanced(train, cfg.layout, &mut state.data_rng)?;
            let (report, _) = train_step(&mut model, &mut state, cfg, &batch)?;
            writer.write(&report)?;
            sum += report.j_r;
            log.push(report);
        }
        update_schedules(&mut state, cfg);
        let validation = val.map(|v| validate(&model, v, &ks)).transpose()?;
        let record = EpochRecord {
            epoch,
            mean_j_r: sum / per_epoch as f64,
            eta,
            validation,
        };
        if let Some(r1) = record.validation.as_ref().and_then(|m| m.recall(ks[0])) {
            log::info!(
                "epoch {epoch}: J_r {:.4}, R@{} {:.4}",
                record.mean_j_r,
                ks[0],
                r1
            );
            if r1 > best {
                best = r1;
                stale = 0;
            } else {
                stale += 1;
            }
        } else {
            log::info!("epoch {epoch}: J_r {:.4}", record.mean_j_r);
        }
        if let Some(f) = opts.on_epoch {
            f(&record);
        }
        history.push(record);
        if let Some(d) = &ckpt_dir {
            let name = format!("epoch_{epoch:03}");
            save_checkpoint(
                &d.join(name),
                &model,
                cfg,
                train.dim(),
                train.num_classes(),
                epoch,
                &history,
            )?;
        }
        if opts.patience.is_some_and(|p| stale >= p) {
            log::info!("no validation improvement for {stale} epochs; stopping");
            break;
        }
    }
    writer.flush()?;
    Ok(FitOutcome {
        model,
        state,
        history,
        log,
    })
}
