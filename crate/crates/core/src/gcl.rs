//! Batch correlation graph and its iterative node/edge message propagation.
//!
//! Nodes start as the embeddings, `V_i = z_i`; edges start as Hadamard
//! products, `E_ij = z_i ⊙ z_j`, for every ordered pair including `i == j`.
//! Each propagation step first updates nodes
//!
//! ```text
//! V̄_i = LN(V_i + MMSA(V)_i + Σ_j E_ij)
//! V_i ← LN(FFN(V̄_i) + V̄_i)
//! ```
//!
//! where the self-attention of row `i` is masked to the negatives of `i`
//! (self and same-class columns get zero weight), then updates edges with a
//! cross-attention from the edge to its two endpoint nodes:
//!
//! ```text
//! Ē_ij = LN(E_ij + CA(E_ij; V_i, V_j))
//! E_ij ← LN(FFN(Ē_ij) + Ē_ij)
//! ```
//!
//! Edges are stored as a `B²×D` matrix, row `i·B + j`.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::backbone::EmbeddingBatch;
use crate::datakit::ClassId;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, Module, Param};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphNetConfig {
    /// Propagation steps `K`.
    pub steps: usize,
    /// Attention heads `H`.
    pub heads: usize,
    pub ffn_expansion: usize,
    /// One node block and one edge block reused at every step.
    pub share_weights: bool,
}

impl Default for GraphNetConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            heads: 2,
            ffn_expansion: 4,
            share_weights: true,
        }
    }
}

impl GraphNetConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("graph.steps", "K must be at least 1"));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "graph.heads",
                format!(
                    "embedding dim {dim} is not divisible by {} heads",
                    self.heads
                ),
            ));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config("graph.ffn_expansion", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self, dim: usize) -> usize {
        dim / self.heads
    }
}

/// Structural switches used by the ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphVariant {
    /// Off: nodes keep their initial embeddings (no global correlations).
    pub node_propagation: bool,
    /// Off: the `Σ_j E_ij` term is dropped from the node update.
    pub edge_sum: bool,
}

impl Default for GraphVariant {
    fn default() -> Self {
        Self {
            node_propagation: true,
            edge_sum: true,
        }
    }
}

/// Sub-layer switches for hand-checkable harnesses. With `ffn` off the second
/// residual sub-layer is skipped entirely; with `layer_norm` off LN is the
/// identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParts {
    pub layer_norm: bool,
    pub ffn: bool,
}

impl Default for BlockParts {
    fn default() -> Self {
        Self {
            layer_norm: true,
            ffn: true,
        }
    }
}

/// Attention, residual normalization and feed-forward weights shared by the
/// node and edge updates.
#[derive(Clone, Debug)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub parts: BlockParts,
}

impl Block {
    pub fn new(name: &str, dim: usize, expansion: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(&format!("{name}.query"), dim, dim, rng),
            key: Linear::new(&format!("{name}.key"), dim, dim, rng),
            value: Linear::new(&format!("{name}.value"), dim, dim, rng),
            output: Linear::new(&format!("{name}.output"), dim, dim, rng),
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            ffn: FeedForward::new(&format!("{name}.ffn"), dim, expansion, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            parts: BlockParts::default(),
        }
    }

    fn norm(&self, t: &mut Tape, which: &LayerNorm, x: Var) -> Var {
        if self.parts.layer_norm {
            which.forward(t, x)
        } else {
            x
        }
    }

    /// `LN(FFN(x̄) + x̄)` after `x̄ = LN(pre)`.
    fn finish(&self, t: &mut Tape, pre: Var) -> Var {
        let bar = self.norm(t, &self.norm1, pre);
        if !self.parts.ffn {
            return bar;
        }
        let f = self.ffn.forward(t, bar);
        let s = t.add(f, bar);
        self.norm(t, &self.norm2, s)
    }
}

impl Module for Block {
    fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        for l in [&self.query, &self.key, &self.value, &self.output] {
            p.extend(l.params());
        }
        p.extend(self.norm1.params());
        p.extend(self.ffn.params());
        p.extend(self.norm2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for l in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ] {
            p.extend(l.params_mut());
        }
        p.extend(self.norm1.params_mut());
        p.extend(self.ffn.params_mut());
        p.extend(self.norm2.params_mut());
        p
    }
}

/// Node and edge states of the batch graph at some propagation step.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationGraph {
    /// `B×D`.
    pub nodes: Mat,
    /// `B²×D`, row `i·B + j` holds `E_ij`.
    pub edges: Mat,
    pub step: usize,
    /// True between the node update and the edge update of a step.
    pub nodes_ahead: bool,
    pub labels: Vec<ClassId>,
}

impl CorrelationGraph {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn edge(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.edges.row(i * self.batch_size() + j)
    }
}

pub fn init_graph(zb: &EmbeddingBatch) -> CorrelationGraph {
    let b = zb.len();
    let d = zb.dim();
    let edges = Mat::from_shape_fn((b * b, d), |(r, c)| zb.z[[r / b, c]] * zb.z[[r % b, c]]);
    CorrelationGraph {
        nodes: zb.z.clone(),
        edges,
        step: 0,
        nodes_ahead: false,
        labels: zb.labels.clone(),
    }
}

/// `true` where attention is blocked: the diagonal and every same-class pair.
pub fn attention_mask(labels: &[ClassId]) -> Result<Array2<bool>> {
    let b = labels.len();
    let mask = Array2::from_shape_fn((b, b), |(i, j)| labels[i] == labels[j]);
    if let Some(row) = mask.rows().into_iter().position(|r| r.iter().all(|&x| x)) {
        return Err(Error::NoNegatives { row });
    }
    Ok(mask)
}

/// Row-major `(i, j)` endpoint indices for the `B²` edges.
pub fn edge_endpoints(b: usize) -> (Vec<usize>, Vec<usize>) {
    let left = (0..b * b).map(|r| r / b).collect();
    let right = (0..b * b).map(|r| r % b).collect();
    (left, right)
}

/// Graph variables recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub nodes: Var,
    pub edges: Var,
}

/// Attention weights observed during a propagation, one entry per step.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    /// Per step, per head: `B×B` row-stochastic node attention.
    pub node: Vec<Vec<Mat>>,
    /// Per step: `B²×H` weight each edge query puts on its first endpoint
    /// `V_i`; the weight on `V_j` is the complement.
    pub edge: Vec<Mat>,
}

#[derive(Clone, Debug)]
pub struct GraphNet {
    cfg: GraphNetConfig,
    dim: usize,
    pub variant: GraphVariant,
    pub node_blocks: Vec<Block>,
    pub edge_blocks: Vec<Block>,
}

impl GraphNet {
    pub fn new(cfg: GraphNetConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(dim)?;
        let copies = if cfg.share_weights { 1 } else { cfg.steps };
        let node_blocks = (0..copies)
            .map(|k| Block::new(&format!("gcl.node{k}"), dim, cfg.ffn_expansion, rng))
            .collect();
        let edge_blocks = (0..copies)
            .map(|k| Block::new(&format!("gcl.edge{k}"), dim, cfg.ffn_expansion, rng))
            .collect();
        Ok(Self {
            cfg,
            dim,
            variant: GraphVariant::default(),
            node_blocks,
            edge_blocks,
        })
    }

    pub fn config(&self) -> &GraphNetConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn block_index(&self, step: usize) -> usize {
        if self.cfg.share_weights {
            0
        } else {
            step
        }
    }

    /// Records the initial graph for embeddings `z` (`B×D`).
    pub fn init_on_tape(t: &mut Tape, z: Var) -> GraphVars {
        let (b, _) = t.shape(z);
        let (left, right) = edge_endpoints(b);
        let zi = t.gather_rows(z, left);
        let zj = t.gather_rows(z, right);
        let edges = t.mul(zi, zj);
        GraphVars { nodes: z, edges }
    }

    fn mmsa(
        &self,
        t: &mut Tape,
        block: &Block,
        nodes: Var,
        mask: &Array2<bool>,
        weights: &mut Vec<Mat>,
    ) -> Var {
        let h = self.cfg.heads;
        let hd = self.cfg.head_dim(self.dim);
        let scale = 1.0 / (hd as f64).sqrt();
        let q = block.query.forward(t, nodes);
        let k = block.key.forward(t, nodes);
        let v = block.value.forward(t, nodes);
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let qh = t.slice_cols(q, head * hd, hd);
            let kh = t.slice_cols(k, head * hd, hd);
            let vh = t.slice_cols(v, head * hd, hd);
            let scores = t.matmul_bt(qh, kh);
            let scores = t.scale(scores, scale);
            let p = t.masked_softmax(scores, mask);
            weights.push(t.value(p).clone());
            heads.push(t.matmul(p, vh));
        }
        let cat = t.concat_cols(&heads);
        block.output.forward(t, cat)
    }

    /// Node update of step `step`; returns the new node variable.
    pub fn node_step(
        &self,
        t: &mut Tape,
        step: usize,
        g: GraphVars,
        mask: &Array2<bool>,
        trace: &mut AttentionTrace,
    ) -> Var {
        if !self.variant.node_propagation {
            trace.node.push(Vec::new());
            return g.nodes;
        }
        let block = &self.node_blocks[self.block_index(step)];
        let (b, _) = t.shape(g.nodes);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        let attn = self.mmsa(t, block, g.nodes, mask, &mut weights);
        trace.node.push(weights);
        let mut pre = t.add(g.nodes, attn);
        if self.variant.edge_sum {
            let esum = t.block_row_sum(g.edges, b);
            pre = t.add(pre, esum);
        }
        block.finish(t, pre)
    }

    /// Edge update of step `step` from already-advanced nodes.
    pub fn edge_step(
        &self,
        t: &mut Tape,
        step: usize,
        g: GraphVars,
        trace: &mut AttentionTrace,
    ) -> Var {
        let block = &self.edge_blocks[self.block_index(step)];
        let h = self.cfg.heads;
        let hd = self.cfg.head_dim(self.dim);
        let scale = 1.0 / (hd as f64).sqrt();
        let (b, _) = t.shape(g.nodes);
        let (left, right) = edge_endpoints(b);

        let q = block.query.forward(t, g.edges);
        let k = block.key.forward(t, g.nodes);
        let v = block.value.forward(t, g.nodes);
        let ki = t.gather_rows(k, left.clone());
        let kj = t.gather_rows(k, right.clone());
        let vi = t.gather_rows(v, left);
        let vj = t.gather_rows(v, right);

        let qi = t.mul(q, ki);
        let si = t.head_sum(qi, h);
        let si = t.scale(si, scale);
        let qj = t.mul(q, kj);
        let sj = t.head_sum(qj, h);
        let sj = t.scale(sj, scale);
        // Softmax over the two endpoint tokens.
        let dij = t.sub(si, sj);
        let dji = t.sub(sj, si);
        let ai = t.sigmoid(dij);
        let aj = t.sigmoid(dji);
        trace.edge.push(t.value(ai).clone());

        let wi = t.head_expand(ai, self.dim);
        let wj = t.head_expand(aj, self.dim);
        let ci = t.mul(wi, vi);
        let cj = t.mul(wj, vj);
        let ctx = t.add(ci, cj);
        let ca = block.output.forward(t, ctx);
        let pre = t.add(g.edges, ca);
        block.finish(t, pre)
    }

    /// All `K` steps from the initial graph of `z`.
    pub fn forward(
        &self,
        t: &mut Tape,
        z: Var,
        labels: &[ClassId],
    ) -> Result<(GraphVars, AttentionTrace)> {
        let (b, d) = t.shape(z);
        if b != labels.len() || d != self.dim {
            return Err(Error::shape(
                "graph input",
                format!("{}×{}", labels.len(), self.dim),
                format!("{b}×{d}"),
            ));
        }
        let mask = attention_mask(labels)?;
        let mut g = Self::init_on_tape(t, z);
        let mut trace = AttentionTrace::default();
        for step in 0..self.cfg.steps {
            g.nodes = self.node_step(t, step, g, &mask, &mut trace);
            g.edges = self.edge_step(t, step, g, &mut trace);
        }
        Ok((g, trace))
    }

    fn load(t: &mut Tape, g: &CorrelationGraph) -> GraphVars {
        GraphVars {
            nodes: t.constant(g.nodes.clone()),
            edges: t.constant(g.edges.clone()),
        }
    }

    fn check_shape(&self, g: &CorrelationGraph) -> Result<()> {
        let b = g.batch_size();
        if g.nodes.dim() != (b, self.dim) || g.edges.dim() != (b * b, self.dim) {
            return Err(Error::shape(
                "correlation graph",
                format!("nodes {b}×{} edges {}×{}", self.dim, b * b, self.dim),
                format!("nodes {:?} edges {:?}", g.nodes.dim(), g.edges.dim()),
            ));
        }
        Ok(())
    }

    /// Advances the nodes of `g` by one step; also returns the per-head
    /// attention maps.
    pub fn node_propagate(&self, g: &CorrelationGraph) -> Result<(CorrelationGraph, Vec<Mat>)> {
        self.check_shape(g)?;
        if g.step >= self.cfg.steps || g.nodes_ahead {
            return Err(Error::Invalid(format!(
                "graph at step {} cannot take another node update (K = {})",
                g.step, self.cfg.steps
            )));
        }
        let mask = attention_mask(&g.labels)?;
        let mut t = Tape::new();
        let vars = Self::load(&mut t, g);
        let mut trace = AttentionTrace::default();
        let nodes = self.node_step(&mut t, g.step, vars, &mask, &mut trace);
        let mut out = g.clone();
        out.nodes = t.value(nodes).clone();
        out.nodes_ahead = true;
        Ok((out, trace.node.pop().unwrap_or_default()))
    }

    /// Advances the edges of `g`, completing the step.
    pub fn edge_propagate(&self, g: &CorrelationGraph) -> Result<(CorrelationGraph, Mat)> {
        self.check_shape(g)?;
        if !g.nodes_ahead {
            return Err(Error::Invalid(
                "edges are updated after the nodes of the same step".into(),
            ));
        }
        let mut t = Tape::new();
        let vars = Self::load(&mut t, g);
        let mut trace = AttentionTrace::default();
        let edges = self.edge_step(&mut t, g.step, vars, &mut trace);
        let mut out = g.clone();
        out.edges = t.value(edges).clone();
        out.nodes_ahead = false;
        out.step += 1;
        Ok((out, trace.edge.pop().unwrap_or_default()))
    }

    /// Runs the remaining steps up to `K`.
    pub fn propagate(&self, g: &CorrelationGraph) -> Result<CorrelationGraph> {
        if g.step != 0 || g.nodes_ahead {
            return Err(Error::Invalid("propagate starts from step 0".into()));
        }
        let mut g = g.clone();
        while g.step < self.cfg.steps {
            let (n, _) = self.node_propagate(&g)?;
            let (e, _) = self.edge_propagate(&n)?;
            g = e;
        }
        Ok(g)
    }
}

impl Module for GraphNet {
    fn params(&self) -> Vec<&Param> {
        self.node_blocks
            .iter()
            .chain(&self.edge_blocks)
            .flat_map(|b| b.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.node_blocks
            .iter_mut()
            .chain(self.edge_blocks.iter_mut())
            .flat_map(|b| b.params_mut())
            .collect()
    }
}
