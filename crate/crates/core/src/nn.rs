//! Trainable parameters and the small layer set the models are built from.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Runtime identity of a parameter tensor. Clones share the id, so a cloned
/// model maps gradients onto the same slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(u64);

#[derive(Clone, Debug)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: Mat,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Mat) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_ids(&self) -> Vec<ParamId> {
        self.params().iter().map(|p| p.id).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform(±1/√in) initialization for weight and bias.
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(input, output, bound, rng)),
            bias: Param::new(format!("{name}.bias"), uniform(1, output, bound, rng)),
        }
    }

    pub fn from_values(name: &str, weight: Mat, bias: Mat) -> Self {
        assert_eq!(bias.dim(), (1, weight.ncols()));
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), Mat::ones((1, dim))),
            bias: Param::new(format!("{name}.bias"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(&self.gain);
        let b = t.param(&self.bias);
        let n = t.layer_norm(x, LAYER_NORM_EPS);
        let y = t.mul_row(n, g);
        t.add_row(y, b)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Position-wise two-layer feed-forward network with a GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, expansion: usize, rng: &mut impl Rng) -> Self {
        let hidden = dim * expansion;
        Self {
            up: Linear::new(&format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(&format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(t, x);
        let h = t.gelu(h);
        self.down.forward(t, h)
    }
}

impl Module for FeedForward {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.up.params();
        p.extend(self.down.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.up.params_mut();
        p.extend(self.down.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clones_share_ids_and_new_params_do_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Linear::new("a", 3, 2, &mut rng);
        let b = a.clone();
        assert_eq!(a.weight.id, b.weight.id);
        assert_ne!(a.weight.id, a.bias.id);
        assert_eq!(a.num_params(), 8);
    }

    #[test]
    fn repeated_binding_accumulates_into_one_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new("l", 2, 2, &mut rng);
        let mut t = Tape::new();
        let x = t.constant(Mat::ones((1, 2)));
        let y1 = lin.forward(&mut t, x);
        let y2 = lin.forward(&mut t, y1);
        let l = t.sum_all(y2);
        let g = t.backward(l);
        assert!(g.has_param(lin.weight.id));
        assert_eq!(g.param_ids().count(), 2);
    }
}
