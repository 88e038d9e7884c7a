//! Training objectives, all recorded on a [`Tape`].
//!
//! Stage 1 guides the generator: per synthetic negative a classification
//! loss, an anchor-similarity loss and a diversity loss on the anchor's
//! coefficient vectors. Stage 2 trains the metric model on the real
//! embeddings, the final node states and the synthetic negatives.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::cacai::SynthesisPlan;
use crate::datakit::{BatchLayout, ClassId};
use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Param};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Weights {
    pub gamma_s: f64,
    pub gamma_d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricLossKind {
    NpModified,
    ProxyAnchor,
}

impl MetricLossKind {
    /// Default diversity weight for this metric loss.
    pub fn default_gamma_d(self) -> f64 {
        match self {
            Self::NpModified => 0.03,
            Self::ProxyAnchor => 0.01,
        }
    }
}

impl std::str::FromStr for MetricLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "np_modified" => Ok(Self::NpModified),
            "proxy_anchor" => Ok(Self::ProxyAnchor),
            other => Err(Error::config(
                "metric_loss",
                format!("unknown metric loss `{other}` (expected np_modified or proxy_anchor)"),
            )),
        }
    }
}

/// Linear `D→C` classifier; `C_z` sees real and synthetic embeddings, `C_v`
/// the final node states.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(name: &str, dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(name, dim, classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        self.linear.forward(t, x)
    }
}

impl Module for ClassifierHead {
    fn params(&self) -> Vec<&Param> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.linear.params_mut()
    }
}

/// One trainable proxy per class, `C×D`.
#[derive(Clone, Debug)]
pub struct ProxyBank {
    pub proxies: Param,
    pub alpha: f64,
    pub delta: f64,
}

impl ProxyBank {
    pub const DEFAULT_ALPHA: f64 = 32.0;
    pub const DEFAULT_DELTA: f64 = 0.1;

    /// Unit-norm random proxies.
    pub fn new(classes: usize, dim: usize, alpha: f64, delta: f64, rng: &mut impl Rng) -> Self {
        let mut p = Mat::from_shape_fn((classes, dim), |_| rng.sample(StandardNormal));
        for mut r in p.rows_mut() {
            let n = r.dot(&r).sqrt().max(f64::MIN_POSITIVE);
            r.mapv_inplace(|v| v / n);
        }
        Self {
            proxies: Param::new("proxies", p),
            alpha,
            delta,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.value.nrows()
    }
}

impl Module for ProxyBank {
    fn params(&self) -> Vec<&Param> {
        vec![&self.proxies]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.proxies]
    }
}

/// Scalar values of one training step. Terms an arm does not compute are
/// omitted from the serialized record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j_sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j_div: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j_gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j_cz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j_gca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j_syn: Option<f64>,
    pub j_r: f64,
    pub j_m: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta: Option<f64>,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        let terms = [
            ("j_ce", self.j_ce),
            ("j_sim", self.j_sim),
            ("j_div", self.j_div),
            ("j_gen", self.j_gen),
            ("j_cz", self.j_cz),
            ("j_gca", self.j_gca),
            ("j_syn", self.j_syn),
            ("j_r", Some(self.j_r)),
            ("j_m", Some(self.j_m)),
        ];
        terms
            .into_iter()
            .find(|(_, v)| v.is_some_and(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }
}

/// Maps labels `1..=C` to class indices, rejecting anything out of range.
pub fn class_indices(labels: &[ClassId], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            if l == 0 || l as usize > classes {
                Err(Error::Invalid(format!(
                    "class {l} is outside the head's 1..={classes}"
                )))
            } else {
                Ok(l as usize - 1)
            }
        })
        .collect()
}

/// Per-row cross-entropy of `head(x)` against `labels`, `n×1`.
pub fn cross_entropy_rows(
    t: &mut Tape,
    head: &ClassifierHead,
    x: Var,
    labels: &[ClassId],
) -> Result<Var> {
    let targets = class_indices(labels, head.num_classes())?;
    let logits = head.forward(t, x);
    Ok(t.cross_entropy(logits, targets))
}

/// Classification loss of each synthetic negative against its class.
pub fn j_ce_rows(
    t: &mut Tape,
    head: &ClassifierHead,
    z_hat: Var,
    plan: &SynthesisPlan,
) -> Result<Var> {
    let classes: Vec<ClassId> = plan.rows.iter().map(|r| r.1).collect();
    cross_entropy_rows(t, head, z_hat, &classes)
}

fn row_norms(t: &mut Tape, x: Var) -> Var {
    let sq = t.square(x);
    let s = t.sum_rows(sq);
    t.sqrt(s)
}

fn check_nonzero_rows(t: &Tape, x: Var, what: &str) -> Result<()> {
    if let Some(r) = t
        .value(x)
        .rows()
        .into_iter()
        .position(|row| row.iter().all(|&v| v == 0.0))
    {
        return Err(Error::Numeric(format!(
            "{what} row {r} is zero; cosine is undefined"
        )));
    }
    Ok(())
}

/// `1 − cos(a_r, b_r)` per row, `n×1`.
pub fn one_minus_cosine(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_nonzero_rows(t, a, "anchor")?;
    check_nonzero_rows(t, b, "synthetic negative")?;
    let dot = t.mul(a, b);
    let dot = t.sum_rows(dot);
    let na = row_norms(t, a);
    let nb = row_norms(t, b);
    let den = t.mul(na, nb);
    let inv = t.recip(den);
    let cos = t.mul(dot, inv);
    let neg = t.scale(cos, -1.0);
    Ok(t.add_scalar(neg, 1.0))
}

/// Anchor-similarity loss per synthetic row.
pub fn j_sim_rows(t: &mut Tape, z: Var, z_hat: Var, plan: &SynthesisPlan) -> Result<Var> {
    let anchors: Vec<usize> = plan.rows.iter().map(|r| r.0).collect();
    let za = t.gather_rows(z, anchors);
    one_minus_cosine(t, za, z_hat)
}

/// `1 − σ` over all channel entries of a `k×D` block, population std.
pub fn one_minus_std(t: &mut Tape, x: Var) -> Result<Var> {
    let (k, d) = t.shape(x);
    if k * d < 2 {
        return Err(Error::Invalid(
            "diversity needs at least 2 coefficients".into(),
        ));
    }
    let mean = t.mean_all(x);
    let ones = t.constant(Mat::ones((k, 1)));
    let col = t.matmul(ones, mean);
    let neg = t.scale(col, -1.0);
    let centered = t.add_col(x, neg);
    let sq = t.square(centered);
    let var = t.mean_all(sq);
    let sd = t.sqrt(var);
    let neg = t.scale(sd, -1.0);
    Ok(t.add_scalar(neg, 1.0))
}

/// Diversity loss per anchor, `B×1`, over the coefficient vectors of the
/// anchor's negative pairs. `lambda` is `B²×D`.
pub fn j_div_rows(t: &mut Tape, lambda: Var, labels: &[ClassId]) -> Result<Var> {
    let b = labels.len();
    let mut per_anchor = Vec::with_capacity(b);
    for i in 0..b {
        let rows: Vec<usize> = (0..b)
            .filter(|&j| labels[j] != labels[i])
            .map(|j| i * b + j)
            .collect();
        if rows.is_empty() {
            return Err(Error::NoNegatives { row: i });
        }
        let block = t.gather_rows(lambda, rows);
        per_anchor.push(one_minus_std(t, block)?);
    }
    Ok(t.concat_rows(&per_anchor))
}

/// Stage-1 terms, each a `1×1` variable.
#[derive(Clone, Copy, Debug)]
pub struct GenTerms {
    pub j_ce: Var,
    pub j_sim: Var,
    pub j_div: Var,
    pub j_gen: Var,
}

/// `(1/(B·N)) Σ_i Σ_{n≠l_i} (J_ce + γ_s J_sim + γ_d J_div)`. The reported
/// component terms are plain means over their rows.
pub fn j_gen(
    t: &mut Tape,
    head: &ClassifierHead,
    z: Var,
    z_hat: Var,
    lambda: Option<Var>,
    plan: &SynthesisPlan,
    labels: &[ClassId],
    layout: BatchLayout,
    w: Stage1Weights,
) -> Result<GenTerms> {
    let ce = j_ce_rows(t, head, z_hat, plan)?;
    let sim = j_sim_rows(t, z, z_hat, plan)?;
    let anchors: Vec<usize> = plan.rows.iter().map(|r| r.0).collect();
    let div_anchor = match lambda {
        Some(l) => j_div_rows(t, l, labels)?,
        // Constant coefficients have zero spread.
        None => t.constant(Mat::ones((labels.len(), 1))),
    };
    let div = t.gather_rows(div_anchor, anchors);
    let s = t.scale(sim, w.gamma_s);
    let d = t.scale(div, w.gamma_d);
    let per_row = t.add(ce, s);
    let per_row = t.add(per_row, d);
    let total = t.sum_all(per_row);
    let norm = (labels.len() * layout.classes) as f64;
    let j_gen = t.scale(total, 1.0 / norm);
    Ok(GenTerms {
        j_ce: t.mean_all(ce),
        j_sim: t.mean_all(sim),
        j_div: t.mean_all(div_anchor),
        j_gen,
    })
}

/// Mean cross-entropy of `head(x)`; used for both `J_cz` and `J_gca`.
pub fn mean_cross_entropy(
    t: &mut Tape,
    head: &ClassifierHead,
    x: Var,
    labels: &[ClassId],
) -> Result<Var> {
    let rows = cross_entropy_rows(t, head, x, labels)?;
    Ok(t.mean_all(rows))
}

pub fn j_cz(t: &mut Tape, head: &ClassifierHead, z: Var, labels: &[ClassId]) -> Result<Var> {
    mean_cross_entropy(t, head, z, labels)
}

pub fn j_gca(t: &mut Tape, head: &ClassifierHead, nodes: Var, labels: &[ClassId]) -> Result<Var> {
    mean_cross_entropy(t, head, nodes, labels)
}

/// `(1/B) Σ_i log(1 + Σ_n exp(z_i·ẑ_in − z_i·z⁺_i))`.
pub fn j_syn(t: &mut Tape, z: Var, z_hat: Var, plan: &SynthesisPlan) -> Var {
    let anchors: Vec<usize> = plan.rows.iter().map(|r| r.0).collect();
    let pos: Vec<usize> = anchors.iter().map(|&i| plan.positives[i]).collect();
    let za = t.gather_rows(z, anchors.clone());
    let zp = t.gather_rows(z, pos);
    let neg = t.mul(za, z_hat);
    let neg = t.sum_rows(neg);
    let ps = t.mul(za, zp);
    let ps = t.sum_rows(ps);
    let x = t.sub(neg, ps);
    let per_anchor = t.log1p_sum_exp(x, anchors, plan.batch_size);
    t.mean_all(per_anchor)
}

/// Modified N-pair loss: group 0 anchors against every later group.
pub fn np_loss(t: &mut Tape, z: Var, layout: BatchLayout) -> Result<Var> {
    let n = layout.classes;
    let m = layout.instances;
    if m < 2 {
        return Err(Error::config(
            "layout.instances",
            "N-pair loss needs at least 2 instances per class",
        ));
    }
    let (b, _) = t.shape(z);
    if b != n * m {
        return Err(Error::shape("N-pair batch", n * m, b));
    }
    let anchors = t.gather_rows(z, (0..n).collect());
    let sims = t.matmul_bt(anchors, z);
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::new();
    for g in 1..m {
        for j in 0..n {
            for q in (0..n).filter(|&q| q != j) {
                neg.push((j, q + g * n));
                pos.push((j, j + g * n));
                segments.push((g - 1) * n + j);
            }
        }
    }
    let sn = t.gather_elems(sims, neg);
    let sp = t.gather_elems(sims, pos);
    let x = t.sub(sn, sp);
    let per = t.log1p_sum_exp(x, segments, (m - 1) * n);
    Ok(t.mean_all(per))
}

/// Original N-pair loss on explicit anchor and positive sets.
pub fn np_original(t: &mut Tape, anchors: Var, positives: Var) -> Var {
    let (n, _) = t.shape(anchors);
    let sims = t.matmul_bt(anchors, positives);
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::new();
    for j in 0..n {
        for q in (0..n).filter(|&q| q != j) {
            neg.push((j, q));
            pos.push((j, j));
            segments.push(j);
        }
    }
    let sn = t.gather_elems(sims, neg);
    let sp = t.gather_elems(sims, pos);
    let x = t.sub(sn, sp);
    let per = t.log1p_sum_exp(x, segments, n);
    t.mean_all(per)
}

/// Proxy Anchor loss with cosine similarity.
pub fn pa_loss(t: &mut Tape, z: Var, labels: &[ClassId], bank: &ProxyBank) -> Result<Var> {
    let c = bank.num_classes();
    let cls = class_indices(labels, c)?;
    let p = t.param(&bank.proxies);
    let zn = t.normalize_rows(z);
    let pn = t.normalize_rows(p);
    let s = t.matmul_bt(zn, pn);

    let mut pos = Vec::new();
    let mut pos_seg = Vec::new();
    let mut neg = Vec::new();
    let mut neg_seg = Vec::new();
    for (x, &k) in cls.iter().enumerate() {
        for q in 0..c {
            if q == k {
                pos.push((x, q));
                pos_seg.push(q);
            } else {
                neg.push((x, q));
                neg_seg.push(q);
            }
        }
    }
    let mut with_pos: Vec<usize> = pos_seg.clone();
    with_pos.sort_unstable();
    with_pos.dedup();

    let sp = t.gather_elems(s, pos);
    let sp = t.add_scalar(sp, -bank.delta);
    let sp = t.scale(sp, -bank.alpha);
    let pull = t.log1p_sum_exp(sp, pos_seg, c);
    let pull = t.sum_all(pull);
    let pull = t.scale(pull, 1.0 / with_pos.len() as f64);

    let total = if neg.is_empty() {
        pull
    } else {
        let sn = t.gather_elems(s, neg);
        let sn = t.add_scalar(sn, bank.delta);
        let sn = t.scale(sn, bank.alpha);
        let push = t.log1p_sum_exp(sn, neg_seg, c);
        let push = t.sum_all(push);
        let push = t.scale(push, 1.0 / c as f64);
        t.add(pull, push)
    };
    Ok(total)
}

/// Metric loss `J_r` of the configured kind.
pub fn metric_loss(
    t: &mut Tape,
    kind: MetricLossKind,
    z: Var,
    labels: &[ClassId],
    layout: BatchLayout,
    bank: Option<&ProxyBank>,
) -> Result<Var> {
    match kind {
        MetricLossKind::NpModified => np_loss(t, z, layout),
        MetricLossKind::ProxyAnchor => {
            let bank =
                bank.ok_or_else(|| Error::Invalid("proxy anchor loss needs proxies".into()))?;
            pa_loss(t, z, labels, bank)
        }
    }
}

/// `γ_n = exp(−β / J_gen)`.
pub fn gamma_n(beta: f64, j_gen: f64) -> f64 {
    (-beta / j_gen).exp()
}

/// `J_r + J_gca + (1 − γ_n) J_syn`; either optional term may be absent.
pub fn j_m(t: &mut Tape, j_r: Var, j_gca: Option<Var>, j_syn: Option<Var>, gamma_n: f64) -> Var {
    let mut total = j_r;
    if let Some(g) = j_gca {
        total = t.add(total, g);
    }
    if let Some(s) = j_syn {
        let w = t.scale(s, 1.0 - gamma_n);
        total = t.add(total, w);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.scalar(v)
    }

    fn head_with(w: Mat, b: Mat) -> ClassifierHead {
        ClassifierHead {
            linear: Linear::from_values("h", w, b),
        }
    }

    #[test]
    fn cross_entropy_hand_value() {
        // Identity head over logits (1, 2, 3), true class 3.
        let h = head_with(Mat::eye(3), Mat::zeros((1, 3)));
        let v = eval(|t| {
            let x = t.constant(array![[1.0, 2.0, 3.0]]);
            mean_cross_entropy(t, &h, x, &[3]).unwrap()
        });
        assert!((v - 0.40761).abs() < 1e-4);
        let u = eval(|t| {
            let x = t.constant(array![[0.5, 0.5, 0.5]]);
            mean_cross_entropy(t, &h, x, &[1]).unwrap()
        });
        assert!((u - 3f64.ln()).abs() < 1e-12);
        let big = eval(|t| {
            let x = t.constant(array![[0.0, 0.0, 60.0]]);
            mean_cross_entropy(t, &h, x, &[3]).unwrap()
        });
        assert!(big < 1e-20);
        let mut t = Tape::new();
        let x = t.constant(array![[0.0, 0.0, 0.0]]);
        assert!(mean_cross_entropy(&mut t, &h, x, &[4]).is_err());
    }

    #[test]
    fn cosine_loss_range() {
        let f = |a: Mat, b: Mat| {
            eval(|t| {
                let a = t.constant(a);
                let b = t.constant(b);
                let r = one_minus_cosine(t, a, b).unwrap();
                t.sum_all(r)
            })
        };
        assert!(f(array![[0.3, 0.4]], array![[0.3, 0.4]]).abs() < 1e-15);
        assert_eq!(f(array![[1.0, 0.0]], array![[0.0, 2.0]]), 1.0);
        assert_eq!(f(array![[1.0, 0.0]], array![[-3.0, 0.0]]), 2.0);
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 0.0]]);
        let b = t.constant(array![[0.0, 0.0]]);
        assert!(one_minus_cosine(&mut t, a, b).is_err());
    }

    #[test]
    fn diversity_hand_values() {
        let f = |x: Mat| {
            eval(|t| {
                let x = t.constant(x);
                one_minus_std(t, x).unwrap()
            })
        };
        assert_eq!(f(Mat::from_elem((3, 2), 0.4)), 1.0);
        assert!((f(array![[0.0, 1.0], [1.0, 0.0]]) - 0.5).abs() < 1e-15);
        let mut t = Tape::new();
        let x = t.constant(array![[0.5]]);
        assert!(one_minus_std(&mut t, x).is_err());
    }

    #[test]
    fn gamma_schedule() {
        assert!((gamma_n(2.0, 2.0) - 0.36788).abs() < 1e-5);
        assert!(gamma_n(2.0, 1e12) > 0.999_999);
        let mut prev = 0.0;
        for j in [0.1, 0.5, 1.0, 2.0, 8.0] {
            let g = gamma_n(2.0, j);
            assert!(g > prev);
            prev = g;
        }
    }

    #[test]
    fn degenerate_np_is_log_n() {
        let layout = BatchLayout::new(3, 3).unwrap();
        let v = eval(|t| {
            let z = t.constant(Mat::from_elem((9, 4), 0.5));
            np_loss(t, z, layout).unwrap()
        });
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn proxy_anchor_margin_point() {
        // One sample on one proxy at s = δ: pull term log(1 + e⁰) = ln 2.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bank = ProxyBank::new(1, 2, 32.0, 0.1, &mut rng);
        bank.proxies.value = array![[1.0, 0.0]];
        let c = 0.1f64;
        let z = array![[c, (1.0 - c * c).sqrt()]];
        let v = eval(|t| {
            let z = t.constant(z);
            pa_loss(t, z, &[1], &bank).unwrap()
        });
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn j_m_composition() {
        let v = eval(|t| {
            let r = t.constant(array![[1.0]]);
            let g = t.constant(array![[2.0]]);
            let s = t.constant(array![[4.0]]);
            j_m(t, r, Some(g), Some(s), 0.25)
        });
        assert_eq!(v, 6.0);
    }

    #[test]
    fn report_omits_absent_terms() {
        let r = LossReport {
            j_r: 1.0,
            j_m: 1.0,
            ..Default::default()
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(!s.contains("j_syn"));
        assert_eq!(serde_json::from_str::<LossReport>(&s).unwrap(), r);
        let bad = LossReport {
            j_gen: Some(f64::NAN),
            ..r
        };
        assert_eq!(bad.non_finite(), Some("j_gen"));
    }

    #[test]
    fn metric_loss_kind_parses() {
        assert_eq!(
            "proxy_anchor".parse::<MetricLossKind>().unwrap(),
            MetricLossKind::ProxyAnchor
        );
        assert!("triplet".parse::<MetricLossKind>().is_err());
        assert_eq!(MetricLossKind::NpModified.default_gamma_d(), 0.03);
    }
}
