//! Channel-adaptive interpolation of anchor/negative pairs.
//!
//! Each final edge state becomes a per-channel coefficient vector
//! `λ_ij = sigmoid(FC(E_ij))`. For an anchor `i` with positive distance `d⁺`
//! and a negative `j` at distance `d⁻`:
//!
//! ```text
//! z̃_ij = z_i + [d⁺ + λ_ij ⊙ η(d⁻ − d⁺)] ⊙ (z_j − z_i) / d⁻    if d⁻ > d⁺
//! z̃_ij = z_j                                                 otherwise
//! ```
//!
//! with `η = exp(−α / J_avg)`. The interpolants of one anchor toward one
//! negative class are folded left to right, `acc ← w·acc + (1 − w)·next`,
//! `w ~ U(0, 1)`, into a single synthetic negative `ẑ_in`.

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Mat, Tape, Var};
use crate::datakit::ClassId;
use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Param};

/// Floor applied to a non-positive average loss before computing `η`.
pub const J_AVG_FLOOR: f64 = 1e-8;

/// `η = exp(−α / J_avg)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolationContext {
    pub alpha_pull: f64,
    pub j_avg: f64,
    pub eta: f64,
}

impl InterpolationContext {
    pub fn new(alpha_pull: f64, j_avg: f64) -> Self {
        let j = if j_avg.is_nan() || j_avg <= 0.0 {
            log::warn!("average metric loss {j_avg} is not positive; clamping to {J_AVG_FLOOR}");
            J_AVG_FLOOR
        } else {
            j_avg
        };
        Self {
            alpha_pull,
            j_avg: j,
            eta: eta(alpha_pull, j),
        }
    }

    /// A fixed `η`, e.g. for hand-built cases.
    pub fn with_eta(eta: f64) -> Self {
        Self {
            alpha_pull: f64::NAN,
            j_avg: f64::NAN,
            eta,
        }
    }
}

pub fn eta(alpha_pull: f64, j_avg: f64) -> f64 {
    (-alpha_pull / j_avg).exp()
}

/// Per-pair coefficient vectors, `B²×D`, row `i·B + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationVectors {
    pub lambda: Mat,
    pub batch_size: usize,
}

impl InterpolationVectors {
    pub fn get(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.lambda.row(i * self.batch_size + j)
    }
}

/// The `D→D` map with bias that turns edges into coefficients.
#[derive(Clone, Debug)]
pub struct LambdaHead {
    pub fc: Linear,
}

impl LambdaHead {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc: Linear::new("cacai.fc", dim, dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, edges: Var) -> Var {
        let logits = self.fc.forward(t, edges);
        t.sigmoid(logits)
    }

    pub fn compute_lambda(&self, edges: &Mat) -> Result<InterpolationVectors> {
        let rows = edges.nrows();
        let b = (rows as f64).sqrt().round() as usize;
        if b * b != rows || edges.ncols() != self.fc.input_dim() {
            return Err(Error::shape(
                "edge tensor",
                format!("B²×{}", self.fc.input_dim()),
                format!("{rows}×{}", edges.ncols()),
            ));
        }
        let mut t = Tape::new();
        let e = t.constant(edges.clone());
        let l = self.forward(&mut t, e);
        Ok(InterpolationVectors {
            lambda: t.value(l).clone(),
            batch_size: b,
        })
    }
}

impl Module for LambdaHead {
    fn params(&self) -> Vec<&Param> {
        self.fc.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.fc.params_mut()
    }
}

/// One uniformly chosen same-class partner per anchor (never the anchor).
pub fn select_positives(labels: &[ClassId], rng: &mut impl Rng) -> Result<Vec<usize>> {
    (0..labels.len())
        .map(|i| {
            let same: Vec<usize> = (0..labels.len())
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if same.is_empty() {
                return Err(Error::Sampling(format!(
                    "anchor {i} (class {}) has no positive in the batch",
                    labels[i]
                )));
            }
            Ok(same[rng.random_range(0..same.len())])
        })
        .collect()
}

/// `d⁺_i = ‖z_{p(i)} − z_i‖` and `d⁻_ij = ‖z_j − z_i‖`.
pub fn pair_distances(z: &Mat, positives: &[usize]) -> (Vec<f64>, Mat) {
    let b = z.nrows();
    let dist = |i: usize, j: usize| {
        z.row(j)
            .iter()
            .zip(z.row(i))
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt()
    };
    let d_minus = Mat::from_shape_fn((b, b), |(i, j)| dist(i, j));
    let d_plus = positives
        .iter()
        .enumerate()
        .map(|(i, &p)| d_minus[[i, p]])
        .collect();
    (d_plus, d_minus)
}

/// Single pair interpolation. `lambda` of length 1 is broadcast over channels.
pub fn interpolate_pair(
    z_i: ArrayView1<f64>,
    z_j: ArrayView1<f64>,
    lambda: ArrayView1<f64>,
    d_plus: f64,
    d_minus: f64,
    eta: f64,
) -> Array1<f64> {
    if d_minus <= d_plus {
        return z_j.to_owned();
    }
    let span = eta * (d_minus - d_plus);
    Array1::from_shape_fn(z_i.len(), |c| {
        let l = if lambda.len() == 1 {
            lambda[0]
        } else {
            lambda[c]
        };
        z_i[c] + (d_plus + l * span) * (z_j[c] - z_i[c]) / d_minus
    })
}

/// Expands a left fold with draws `w_1..w_{k−1}` into direct weights:
/// `c_0 = Π w_t`, `c_t = (1 − w_t) Π_{s>t} w_s`.
pub fn fusion_coefficients(draws: &[f64]) -> Vec<f64> {
    let mut c = vec![1.0];
    for &w in draws {
        for x in &mut c {
            *x *= w;
        }
        c.push(1.0 - w);
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub z_hat: Array1<f64>,
    pub draws: Vec<f64>,
    /// Direct convex weights, one per input.
    pub weights: Vec<f64>,
}

/// Folds `items` with the given draws (one fewer than items).
pub fn fuse_with_draws(items: &[Array1<f64>], draws: &[f64]) -> Result<Fusion> {
    let Some(first) = items.first() else {
        return Err(Error::Invalid("cannot fuse an empty set".into()));
    };
    if draws.len() + 1 != items.len() {
        return Err(Error::shape("fusion draws", items.len() - 1, draws.len()));
    }
    let mut acc = first.clone();
    for (next, &w) in items[1..].iter().zip(draws) {
        acc = &acc * w + next * (1.0 - w);
    }
    Ok(Fusion {
        z_hat: acc,
        draws: draws.to_vec(),
        weights: fusion_coefficients(draws),
    })
}

pub fn fuse_random_weighting(items: &[Array1<f64>], rng: &mut impl Rng) -> Result<Fusion> {
    let draws: Vec<f64> = (1..items.len()).map(|_| rng.random::<f64>()).collect();
    fuse_with_draws(items, &draws)
}

/// Variants of the synthesis procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthesisOptions {
    /// Scalar `λ = 1` per pair instead of the learned channel-wise vectors.
    pub single_coeff: bool,
    /// Off: one interpolant per negative class is picked uniformly instead.
    pub random_weighting: bool,
    /// Fold interpolants in a random order rather than group order.
    pub shuffle: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            single_coeff: false,
            random_weighting: true,
            shuffle: false,
        }
    }
}

/// Everything about a synthesis that is fixed before differentiation: branch
/// of each pair, fold order and fusion weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisPlan {
    pub batch_size: usize,
    /// `(anchor, negative class)` of each synthetic row.
    pub rows: Vec<(usize, ClassId)>,
    /// Interpolated pairs `(i, j)`; the first `far` take the interpolation
    /// branch, the rest return `z_j`.
    pub pairs: Vec<(usize, usize)>,
    pub far: usize,
    pub positives: Vec<usize>,
    /// Per row, indices into `pairs` in fold order.
    pub members: Vec<Vec<usize>>,
    /// Per row, convex weights aligned with `members`.
    pub weights: Vec<Vec<f64>>,
}

impl SynthesisPlan {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `S×P` matrix with `ẑ = C · z̃`.
    pub fn coefficient_matrix(&self) -> Mat {
        let mut c = Mat::zeros((self.rows.len(), self.pairs.len()));
        for (r, (m, w)) in self.members.iter().zip(&self.weights).enumerate() {
            for (&p, &x) in m.iter().zip(w) {
                c[[r, p]] += x;
            }
        }
        c
    }

    /// Row of the synthetic negative of anchor `i` toward class `n`.
    pub fn row_of(&self, i: usize, n: ClassId) -> Option<usize> {
        self.rows.iter().position(|&r| r == (i, n))
    }
}

/// Decides branches and draws fusion weights. Negative classes are visited in
/// order of first appearance; members of a class in batch order.
pub fn plan_synthesis(
    labels: &[ClassId],
    positives: Vec<usize>,
    d_plus: &[f64],
    d_minus: &Mat,
    opts: SynthesisOptions,
    rng: &mut impl Rng,
) -> Result<SynthesisPlan> {
    let b = labels.len();
    if positives.len() != b || d_plus.len() != b || d_minus.dim() != (b, b) {
        return Err(Error::shape("synthesis inputs", b, positives.len()));
    }
    let mut classes: Vec<ClassId> = Vec::new();
    for &l in labels {
        if !classes.contains(&l) {
            classes.push(l);
        }
    }
    if classes.len() < 2 {
        return Err(Error::NoNegatives { row: 0 });
    }

    let mut rows = Vec::new();
    let mut row_pairs: Vec<Vec<(usize, usize)>> = Vec::new();
    for i in 0..b {
        for &n in classes.iter().filter(|&&n| n != labels[i]) {
            let mut js: Vec<usize> = (0..b).filter(|&j| labels[j] == n).collect();
            if opts.shuffle {
                js.shuffle(rng);
            }
            rows.push((i, n));
            row_pairs.push(js.into_iter().map(|j| (i, j)).collect());
        }
    }

    let is_far = |&(i, j): &(usize, usize)| d_minus[[i, j]] > d_plus[i];
    let all: Vec<(usize, usize)> = row_pairs.iter().flatten().copied().collect();
    let (far_pairs, near_pairs): (Vec<_>, Vec<_>) = all.iter().partition(|p| is_far(p));
    let far = far_pairs.len();
    let pairs: Vec<(usize, usize)> = far_pairs.into_iter().chain(near_pairs).collect();
    let index: std::collections::HashMap<(usize, usize), usize> =
        pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();

    let mut members = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    for rp in &row_pairs {
        let idx: Vec<usize> = rp.iter().map(|p| index[p]).collect();
        if opts.random_weighting {
            let draws: Vec<f64> = (1..idx.len()).map(|_| rng.random::<f64>()).collect();
            weights.push(fusion_coefficients(&draws));
            members.push(idx);
        } else {
            let pick = idx[rng.random_range(0..idx.len())];
            weights.push(vec![1.0]);
            members.push(vec![pick]);
        }
    }
    Ok(SynthesisPlan {
        batch_size: b,
        rows,
        pairs,
        far,
        positives,
        members,
        weights,
    })
}

/// Records `z̃` (`P×D`, plan order) on a tape. `lambda` is the `B²×D`
/// coefficient variable, or `None` for the scalar `λ = 1` variant.
pub fn interpolants_on_tape(
    t: &mut Tape,
    z: Var,
    lambda: Option<Var>,
    plan: &SynthesisPlan,
    eta: f64,
) -> Var {
    let b = plan.batch_size;
    let (far, near) = plan.pairs.split_at(plan.far);
    let mut parts = Vec::with_capacity(2);
    if !far.is_empty() {
        let left: Vec<usize> = far.iter().map(|p| p.0).collect();
        let right: Vec<usize> = far.iter().map(|p| p.1).collect();
        let pos: Vec<usize> = left.iter().map(|&i| plan.positives[i]).collect();
        let zi = t.gather_rows(z, left);
        let zj = t.gather_rows(z, right);
        let zp = t.gather_rows(z, pos);
        let diff = t.sub(zj, zi);
        let dm = norm_rows(t, diff);
        let dp_vec = t.sub(zp, zi);
        let dp = norm_rows(t, dp_vec);
        let gap = t.sub(dm, dp);
        let span = t.scale(gap, eta);
        let coef = match lambda {
            Some(l) => {
                let rows: Vec<usize> = far.iter().map(|&(i, j)| i * b + j).collect();
                let lam = t.gather_rows(l, rows);
                let scaled = t.mul_col(lam, span);
                t.add_col(scaled, dp)
            }
            None => t.add(dp, span),
        };
        let inv = t.recip(dm);
        let unit = t.mul_col(diff, inv);
        let step = match lambda {
            Some(_) => t.mul(coef, unit),
            None => t.mul_col(unit, coef),
        };
        parts.push(t.add(zi, step));
    }
    if !near.is_empty() {
        let right: Vec<usize> = near.iter().map(|p| p.1).collect();
        parts.push(t.gather_rows(z, right));
    }
    t.concat_rows(&parts)
}

fn norm_rows(t: &mut Tape, x: Var) -> Var {
    let sq = t.square(x);
    let s = t.sum_rows(sq);
    t.sqrt(s)
}

/// Records `ẑ = C · z̃` (`S×D`, plan row order).
pub fn synthesize_on_tape(
    t: &mut Tape,
    z: Var,
    lambda: Option<Var>,
    plan: &SynthesisPlan,
    eta: f64,
) -> Var {
    let zt = interpolants_on_tape(t, z, lambda, plan, eta);
    let c = t.constant(plan.coefficient_matrix());
    t.matmul(c, zt)
}

/// Synthetic negatives with provenance.
#[derive(Clone, Debug)]
pub struct SyntheticNegatives {
    /// `S×D`, one row per `(anchor, negative class)`.
    pub z_hat: Mat,
    /// `P×D`, one row per interpolated pair.
    pub z_tilde: Mat,
    pub plan: SynthesisPlan,
}

/// Value-level synthesis for a whole batch.
pub fn synthesize(
    z: &Mat,
    labels: &[ClassId],
    lambda: Option<&InterpolationVectors>,
    ctx: &InterpolationContext,
    positives: Vec<usize>,
    opts: SynthesisOptions,
    rng: &mut impl Rng,
) -> Result<SyntheticNegatives> {
    let (d_plus, d_minus) = pair_distances(z, &positives);
    let plan = plan_synthesis(labels, positives, &d_plus, &d_minus, opts, rng)?;
    let mut t = Tape::new();
    let zv = t.constant(z.clone());
    let lv = match (lambda, opts.single_coeff) {
        (Some(l), false) => Some(t.constant(l.lambda.clone())),
        (None, false) => {
            return Err(Error::Invalid(
                "channel-wise synthesis needs interpolation vectors".into(),
            ))
        }
        (_, true) => None,
    };
    let zt = interpolants_on_tape(&mut t, zv, lv, &plan, ctx.eta);
    let c = t.constant(plan.coefficient_matrix());
    let zh = t.matmul(c, zt);
    Ok(SyntheticNegatives {
        z_hat: t.value(zh).clone(),
        z_tilde: t.value(zt).clone(),
        plan,
    })
}
