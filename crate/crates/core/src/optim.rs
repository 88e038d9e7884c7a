//! AdamW with decoupled weight decay, and the cosine learning-rate decay.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::autodiff::{Gradients, Mat};
use crate::nn::{Param, ParamId};

#[derive(Clone, Debug)]
struct Moments {
    first: Mat,
    second: Mat,
    steps: i32,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    /// Updates every parameter that has a gradient, at learning rate `lr`.
    /// Parameters without a gradient are left untouched, decay included.
    /// Returns how many tensors were updated.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &Gradients,
        lr: f64,
    ) -> usize {
        let mut updated = 0;
        for p in params {
            let Some(g) = grads.param(p.id) else {
                continue;
            };
            let st = self.state.entry(p.id).or_insert_with(|| Moments {
                first: Mat::zeros(g.dim()),
                second: Mat::zeros(g.dim()),
                steps: 0,
            });
            st.steps += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            st.first
                .zip_mut_with(g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            st.second
                .zip_mut_with(g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let c1 = 1.0 - b1.powi(st.steps);
            let c2 = 1.0 - b2.powi(st.steps);
            let decay = 1.0 - lr * self.weight_decay;
            let eps = self.eps;
            ndarray::Zip::from(&mut p.value)
                .and(&st.first)
                .and(&st.second)
                .for_each(|w, &m, &v| {
                    *w = *w * decay - lr * (m / c1) / ((v / c2).sqrt() + eps);
                });
            updated += 1;
        }
        updated
    }

    /// The configured rate, unscheduled.
    pub fn step_default<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &Gradients,
    ) -> usize {
        let lr = self.lr;
        self.step(params, grads, lr)
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_decay(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (PI * progress).cos())
}
