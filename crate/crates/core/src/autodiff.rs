//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix. Scalars are `1×1`, column
//! vectors `n×1`. Leaves are either trainable parameters (bound through
//! [`Tape::param`]), tracked inputs, or constants. Constants never receive
//! gradient, so detaching a value is just re-entering it as a constant
//! ([`Tape::detach`]).
//!
//! Nodes that do not depend on any tracked leaf are skipped during the
//! backward pass, which makes stop-gradient boundaries free.

use std::collections::{HashMap, HashSet};

use ndarray::{s, Array2, Axis, Zip};

use crate::nn::{Param, ParamId};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Sigmoid(Var),
    Gelu(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BlockRowSum(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Log1pSumExp {
        x: Var,
        segments: Vec<usize>,
        weights: Vec<f64>,
    },
    HeadSum(Var, usize),
    HeadExpand(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
    param: Option<ParamId>,
}

/// Records a computation so it can be differentiated.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    vars: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient with respect to a node, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn has_param(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters in `ids` are bound as constants for the lifetime of the tape.
    pub fn with_frozen(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            frozen: ids.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter. Repeated binds of the same parameter share one leaf.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bound.get(&p.id) {
            return v;
        }
        let tracked = !self.frozen.contains(&p.id);
        let v = self.push(p.value.clone(), Op::Leaf, tracked);
        self.nodes[v.0].param = Some(p.id);
        self.bound.insert(p.id, v);
        v
    }

    /// Copies a value into a fresh constant leaf: the stop-gradient operator.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, c), t)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let t = self.tracked(&[a]);
        self.push(value, Op::AddScalar(a), t)
    }

    /// `x (n×d) + r (1×d)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let value = self.value(x) + self.value(r);
        let t = self.tracked(&[x, r]);
        self.push(value, Op::AddRow(x, r), t)
    }

    /// `x (n×d) ⊙ r (1×d)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let value = self.value(x) * self.value(r);
        let t = self.tracked(&[x, r]);
        self.push(value, Op::MulRow(x, r), t)
    }

    /// `x (n×d) + c (n×1)` broadcast over columns.
    pub fn add_col(&mut self, x: Var, c: Var) -> Var {
        let value = self.value(x) + self.value(c);
        let t = self.tracked(&[x, c]);
        self.push(value, Op::AddCol(x, c), t)
    }

    /// `x (n×d) ⊙ c (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let value = self.value(x) * self.value(c);
        let t = self.tracked(&[x, c]);
        self.push(value, Op::MulCol(x, c), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let t = self.tracked(&[a]);
        self.push(value, Op::Exp(a), t)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let t = self.tracked(&[a]);
        self.push(value, Op::Ln(a), t)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let t = self.tracked(&[a]);
        self.push(value, Op::Sqrt(a), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let t = self.tracked(&[a]);
        self.push(value, Op::Square(a), t)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::recip);
        let t = self.tracked(&[a]);
        self.push(value, Op::Recip(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let t = self.tracked(&[a]);
        self.push(value, Op::Sigmoid(a), t)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let t = self.tracked(&[a]);
        self.push(value, Op::Gelu(a), t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(value, Op::SumAll(a), t)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `n×d -> n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let t = self.tracked(&[a]);
        self.push(value, Op::SumRows(a), t)
    }

    /// Column sums: `n×d -> 1×d`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let t = self.tracked(&[a]);
        self.push(value, Op::SumCols(a), t)
    }

    /// Sums each run of `block` consecutive rows: `(g·block)×d -> g×d`.
    pub fn block_row_sum(&mut self, a: Var, block: usize) -> Var {
        let x = self.value(a);
        let (n, d) = x.dim();
        assert!(
            block > 0 && n % block == 0,
            "rows {n} not divisible by block {block}"
        );
        let mut value = Mat::zeros((n / block, d));
        for (g, mut row) in value.rows_mut().into_iter().enumerate() {
            for r in 0..block {
                row += &x.row(g * block + r);
            }
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::BlockRowSum(a, block), t)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let t = self.tracked(&[a]);
        self.push(value, Op::GatherRows(a, idx), t)
    }

    /// Picks individual entries into an `n×1` column.
    pub fn gather_elems(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        let value = Mat::from_shape_fn((idx.len(), 1), |(r, _)| x[idx[r]]);
        let t = self.tracked(&[a]);
        self.push(value, Op::GatherElems(a, idx), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let t = self.tracked(&[a]);
        self.push(value, Op::SliceCols(a, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let t = self.tracked(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        let t = self.tracked(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), t)
    }

    /// Row softmax where `blocked[(r, c)]` entries get an additive −∞ before
    /// normalization, hence exactly zero weight. Every row needs at least one
    /// open column.
    pub fn masked_softmax(&mut self, a: Var, blocked: &Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), blocked.dim());
        let mut value = Mat::zeros(x.dim());
        for ((xr, br), mut out) in x
            .rows()
            .into_iter()
            .zip(blocked.rows())
            .zip(value.rows_mut())
        {
            assert!(br.iter().any(|&b| !b), "row with no open column");
            // NaN scores propagate into the output rather than being skipped.
            let max = xr
                .iter()
                .zip(br.iter())
                .filter(|(_, &b)| !b)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, |m, v| {
                    if v.is_nan() || m.is_nan() {
                        f64::NAN
                    } else {
                        m.max(v)
                    }
                });
            let mut total = 0.0;
            for ((o, &v), &b) in out.iter_mut().zip(xr.iter()).zip(br.iter()) {
                if !b {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            out.mapv_inplace(|o| o / total);
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::MaskedSoftmax(a), t)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::LayerNorm { x: a, inv_std }, t)
    }

    /// Divides every row by its L2 norm. Callers must reject zero rows first.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut value = x.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::NormalizeRows { x: a, norms }, t)
    }

    /// Per-row softmax cross-entropy against target column indices: `n×c -> n×1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len());
        let mut probs = x.clone();
        let mut value = Mat::zeros((x.nrows(), 1));
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
            value[[r, 0]] = max + total.ln() - x[[r, targets[r]]];
        }
        let t = self.tracked(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            t,
        )
    }

    /// For an `n×1` column and a segment id per row, returns the
    /// `num_segments×1` column of `ln(1 + Σ_{r ∈ seg} exp(x_r))`.
    /// Empty segments evaluate to exactly zero.
    pub fn log1p_sum_exp(&mut self, x: Var, segments: Vec<usize>, num_segments: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (segments.len(), 1));
        // Each segment is a log-sum-exp over {0} ∪ {x_r}.
        let mut max = vec![0.0f64; num_segments];
        for (r, &s) in segments.iter().enumerate() {
            max[s] = max[s].max(xv[[r, 0]]);
        }
        let mut total: Vec<f64> = max.iter().map(|m| (-m).exp()).collect();
        for (r, &s) in segments.iter().enumerate() {
            total[s] += (xv[[r, 0]] - max[s]).exp();
        }
        let value = Mat::from_shape_fn((num_segments, 1), |(s, _)| max[s] + total[s].ln());
        let weights = segments
            .iter()
            .enumerate()
            .map(|(r, &s)| (xv[[r, 0]] - max[s]).exp() / total[s])
            .collect();
        let t = self.tracked(&[x]);
        self.push(
            value,
            Op::Log1pSumExp {
                x,
                segments,
                weights,
            },
            t,
        )
    }

    /// Sums each head's contiguous column block: `n×(h·k) -> n×h`.
    pub fn head_sum(&mut self, a: Var, heads: usize) -> Var {
        let x = self.value(a);
        let (n, d) = x.dim();
        assert_eq!(d % heads, 0);
        let k = d / heads;
        let value = Mat::from_shape_fn((n, heads), |(r, h)| {
            x.slice(s![r, h * k..(h + 1) * k]).sum()
        });
        let t = self.tracked(&[a]);
        self.push(value, Op::HeadSum(a, heads), t)
    }

    /// Repeats each head column over its block: `n×h -> n×(h·k)`.
    pub fn head_expand(&mut self, a: Var, width: usize) -> Var {
        let x = self.value(a);
        let (n, h) = x.dim();
        assert_eq!(width % h, 0);
        let k = width / h;
        let value = Mat::from_shape_fn((n, width), |(r, c)| x[[r, c / k]]);
        let t = self.tracked(&[a]);
        self.push(value, Op::HeadExpand(a, width), t)
    }

    /// Back-propagates from a `1×1` scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Gradients {
                vars: grads,
                params: HashMap::new(),
            };
        }
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads[idx].as_ref()) {
                if node.tracked {
                    params.insert(id, g.clone());
                }
            }
        }
        Gradients {
            vars: grads,
            params,
        }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(x, r) => {
                acc(*x, g.clone());
                acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(x, r) => {
                acc(*x, g * self.value(*r));
                let gr = (g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(*r, gr);
            }
            Op::AddCol(x, c) => {
                acc(*x, g.clone());
                acc(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MulCol(x, c) => {
                acc(*x, g * self.value(*c));
                let gc = (g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*c, gc);
            }
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::MatMulBt(a, b) => {
                acc(*a, g.dot(self.value(*b)));
                acc(*b, g.t().dot(self.value(*a)));
            }
            Op::Exp(a) => acc(*a, g * y),
            Op::Ln(a) => acc(*a, g / self.value(*a)),
            Op::Sqrt(a) => acc(*a, g / &(y * 2.0)),
            Op::Square(a) => acc(*a, g * &(self.value(*a) * 2.0)),
            Op::Recip(a) => acc(*a, -(g * &(y * y))),
            Op::Sigmoid(a) => acc(*a, g * &y.mapv(|s| s * (1.0 - s))),
            Op::Gelu(a) => acc(*a, g * &self.value(*a).mapv(gelu_grad)),
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                acc(*a, Mat::from_elem(shape, g[[0, 0]]));
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a);
                let mut d = Mat::zeros(shape);
                d += g;
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let shape = self.shape(*a);
                let mut d = Mat::zeros(shape);
                d += g;
                acc(*a, d);
            }
            Op::BlockRowSum(a, block) => {
                let shape = self.shape(*a);
                let d = Mat::from_shape_fn(shape, |(r, c)| g[[r / block, c]]);
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d);
            }
            Op::GatherElems(a, idx) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (r, &pos) in idx.iter().enumerate() {
                    d[pos] += g[[r, 0]];
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    acc(p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::MaskedSoftmax(a) => {
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                Zip::from(d.rows_mut())
                    .and(y.rows())
                    .and(&dots)
                    .for_each(|mut dr, yr, &s| {
                        dr.zip_mut_with(&yr, |dv, &yv| *dv -= yv * s);
                    });
                acc(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                // y is the normalized value x̂.
                let dcols = y.ncols() as f64;
                let mut d = Mat::zeros(y.dim());
                for r in 0..y.nrows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.sum() / dcols;
                    let mean_gy = gr.dot(&yr) / dcols;
                    let mut dr = d.row_mut(r);
                    for c in 0..y.ncols() {
                        dr[c] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                acc(*x, d);
            }
            Op::NormalizeRows { x, norms } => {
                let mut d = Mat::zeros(y.dim());
                for r in 0..y.nrows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let proj = gr.dot(&yr);
                    let mut dr = d.row_mut(r);
                    for c in 0..y.ncols() {
                        dr[c] = (gr[c] - yr[c] * proj) / norms[r];
                    }
                }
                acc(*x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= 1.0;
                    let gr = g[[r, 0]];
                    d.row_mut(r).mapv_inplace(|v| v * gr);
                }
                acc(*logits, d);
            }
            Op::Log1pSumExp {
                x,
                segments,
                weights,
            } => {
                let d = Mat::from_shape_fn((segments.len(), 1), |(r, _)| {
                    g[[segments[r], 0]] * weights[r]
                });
                acc(*x, d);
            }
            Op::HeadSum(a, heads) => {
                let shape = self.shape(*a);
                let k = shape.1 / heads;
                let d = Mat::from_shape_fn(shape, |(r, c)| g[[r, c / k]]);
                acc(*a, d);
            }
            Op::HeadExpand(a, width) => {
                let (n, h) = self.shape(*a);
                let k = width / h;
                let d = Mat::from_shape_fn((n, h), |(r, hh)| {
                    g.slice(s![r, hh * k..(hh + 1) * k]).sum()
                });
                acc(*a, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let th = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_difference;
    use ndarray::array;

    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let y = build(&mut t, x);
        let loss = t.sum_all(y);
        let analytic = t.backward(loss).wrt(x).unwrap().clone();
        let numeric = central_difference(&x0, 1e-6, |xv| {
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let y = build(&mut t, x);
            let l = t.sum_all(y);
            t.scalar(l)
        });
        let err = (&analytic - &numeric)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-6, "max abs err {err}\n{analytic}\n{numeric}");
    }

    #[test]
    fn elementwise_gradients() {
        let x0 = array![[0.3, -1.2, 2.0], [0.7, 0.1, -0.4]];
        check_unary(|t, x| t.exp(x), x0.clone());
        check_unary(|t, x| t.sigmoid(x), x0.clone());
        check_unary(|t, x| t.gelu(x), x0.clone());
        check_unary(|t, x| t.square(x), x0.clone());
        let pos = x0.mapv(|v: f64| v.abs() + 0.5);
        check_unary(|t, x| t.ln(x), pos.clone());
        check_unary(|t, x| t.sqrt(x), pos.clone());
        check_unary(|t, x| t.recip(x), pos);
    }

    #[test]
    fn structural_gradients() {
        let x0 = array![
            [0.3, -1.2, 2.0, 0.5],
            [0.7, 0.1, -0.4, 1.1],
            [0.2, 0.2, 0.9, -2.0]
        ];
        let w = array![
            [0.5, -0.3, 0.8, 0.1],
            [1.0, 0.2, -0.7, 0.4],
            [0.3, 0.3, 0.1, 0.9]
        ];
        check_unary(
            move |t, x| {
                let c = t.constant(w.clone());
                let y = t.mul(x, c);
                t.layer_norm(y, 1e-5)
            },
            x0.clone(),
        );
        check_unary(|t, x| t.normalize_rows(x), x0.clone());
        check_unary(
            |t, x| {
                let ce = t.cross_entropy(x, vec![0, 3, 2]);
                t.scale(ce, 1.7)
            },
            x0.clone(),
        );
        let blocked = array![
            [true, false, false, true],
            [false, true, false, false],
            [false, false, true, false]
        ];
        check_unary(
            move |t, x| {
                let p = t.masked_softmax(x, &blocked);
                let c = t.constant(array![
                    [1.0, 2.0, -1.0, 0.5],
                    [0.3, -0.2, 0.1, 2.0],
                    [1.0, 1.0, 0.0, 3.0]
                ]);
                t.mul(p, c)
            },
            x0.clone(),
        );
        check_unary(
            |t, x| {
                let a = t.head_sum(x, 2);
                let b = t.sigmoid(a);
                let e = t.head_expand(b, 4);
                t.mul(e, x)
            },
            x0.clone(),
        );
        check_unary(
            |t, x| {
                let g = t.gather_rows(x, vec![2, 0, 2, 1]);
                let s = t.slice_cols(g, 1, 2);
                let e = t.gather_elems(x, vec![(0, 0), (2, 3), (0, 0)]);
                let k = t_const(t);
                let c = t.concat_rows(&[s, k]);
                let r = t.sum_rows(c);
                let sq = t.square(r);
                let a = t.sum_all(sq);
                let b = t.sum_all(e);
                t.add(a, b)
            },
            x0.clone(),
        );
        check_unary(
            |t, x| {
                let col = t.slice_cols(x, 0, 1);
                let segs = t.log1p_sum_exp(col, vec![1, 0, 1], 3);
                let sq = t.square(segs);
                let row = t.slice_cols(x, 1, 3);
                let bs = t.block_row_sum(row, 3);
                let m = t.mul_row(row, bs);
                let mc = t.mul_col(m, col);
                let ac = t.add_col(mc, col);
                let ar = t.add_row(ac, bs);
                let mm = t.matmul(ar, x);
                let s1 = t.sum_all(mm);
                let s2 = t.sum_all(sq);
                let cc = t.concat_cols(&[s1, s2]);
                t.sum_cols(cc)
            },
            x0,
        );
    }

    fn t_const(t: &mut Tape) -> Var {
        t.constant(array![[1.0, 2.0]])
    }

    #[test]
    fn masked_entries_are_exact_zeros() {
        let mut t = Tape::new();
        let x = t.input(array![[5.0, 1.0, 2.0], [0.0, 100.0, -3.0]]);
        let blocked = array![[true, false, false], [false, true, true]];
        let p = t.masked_softmax(x, &blocked);
        let v = t.value(p);
        assert_eq!(v[[0, 0]], 0.0);
        assert_eq!(v[[1, 1]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        assert_eq!(v[[1, 0]], 1.0);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.input(array![[1.0, 2.0]]);
        let y = t.square(x);
        let d = t.detach(y);
        let z = t.mul(d, x);
        let l = t.sum_all(z);
        let g = t.backward(l);
        // d/dx (sg(x²)·x) = x² only.
        assert_eq!(g.wrt(x).unwrap(), &array![[1.0, 4.0]]);
        assert!(g.wrt(d).is_none());
    }

    #[test]
    fn empty_segment_is_exact_zero() {
        let mut t = Tape::new();
        let x = t.input(array![[0.0], [1.0]]);
        let y = t.log1p_sum_exp(x, vec![0, 0], 2);
        assert_eq!(t.value(y)[[1, 0]], 0.0);
        assert!((t.value(y)[[0, 0]] - (1.0 + 1.0 + 1f64.exp()).ln()).abs() < 1e-15);
    }
}
