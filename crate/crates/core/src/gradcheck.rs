//! Central finite differences for checking tape gradients.
//!
//! The numeric side never touches the tape's backward pass; it only evaluates
//! the forward function at perturbed points.

use crate::autodiff::Mat;
use crate::nn::Module;

pub const DEFAULT_STEP: f64 = 1e-6;

/// `∂f/∂x` for every entry of `x`, by `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(x: &Mat, step: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut probe = x.clone();
    let mut out = Mat::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = f(&probe);
        probe[[r, c]] = orig - step;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * step);
    }
    out
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`. Two gradients that are
/// both below `1e-10` in norm count as equal.
/// Gradient norm under which errors are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let na = analytic.mapv(|v| v * v).sum().sqrt();
    let nn = numeric.mapv(|v| v * v).sum().sqrt();
    // Below this norm the finite-difference estimate is rounding noise, so
    // fall back to the absolute error.
    let scale = na.max(nn);
    if scale < ABS_FLOOR {
        return diff;
    }
    diff / scale
}

/// Outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compares `analytic(model)` (gradient per parameter, in `params()` order,
/// `None` meaning no gradient reached it) with central differences of
/// `loss(model)`. Perturbs parameters in place and restores them.
pub fn check_module<M: Module>(
    model: &mut M,
    step: f64,
    loss: impl Fn(&M) -> f64,
    analytic: impl Fn(&M) -> Vec<Option<Mat>>,
) -> Vec<ParamCheck> {
    let grads = analytic(model);
    let n = model.params().len();
    assert_eq!(grads.len(), n);
    let mut out = Vec::with_capacity(n);
    for (pi, grad) in grads.into_iter().enumerate() {
        let shape = model.params()[pi].value.dim();
        let name = model.params()[pi].name.clone();
        let mut numeric = Mat::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params()[pi].value[[r, c]];
                model.params_mut()[pi].value[[r, c]] = orig + step;
                let up = loss(model);
                model.params_mut()[pi].value[[r, c]] = orig - step;
                let down = loss(model);
                model.params_mut()[pi].value[[r, c]] = orig;
                numeric[[r, c]] = (up - down) / (2.0 * step);
            }
        }
        let analytic = grad.unwrap_or_else(|| Mat::zeros(shape));
        out.push(ParamCheck {
            name,
            rel_error: relative_error(&analytic, &numeric),
            analytic_norm: analytic.mapv(|v| v * v).sum().sqrt(),
        });
    }
    out
}

pub fn worst(checks: &[ParamCheck]) -> Option<&ParamCheck> {
    checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic() {
        let x = array![[1.0, 2.0]];
        let g = central_difference(&x, 1e-6, |v| {
            v[[0, 0]].powi(2) + 2.0 * v[[0, 0]] * v[[0, 1]]
        });
        assert!((g[[0, 0]] - 6.0).abs() < 1e-6);
        assert!((g[[0, 1]] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_is_scale_free() {
        let a = array![[1.0, 0.0]];
        let b = array![[1.0, 1e-3]];
        let e1 = relative_error(&a, &b);
        let e2 = relative_error(&(a * 1e6), &(b * 1e6));
        assert!((e1 - e2).abs() < 1e-12);
        assert_eq!(relative_error(&array![[0.0]], &array![[1e-12]]), 1e-12);
    }
}
