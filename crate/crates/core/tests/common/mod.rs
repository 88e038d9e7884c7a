#![allow(dead_code)]

use hng_core::autodiff::{Mat, Tape, Var};
use hng_core::datakit::{BatchLayout, ClassId, LabeledBatch};
use hng_core::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
use hng_core::trainer::{Ablation, Model, TrainConfig};
use hng_core::{BackboneConfig, GraphNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let mut m = gaussian(rows, cols, rng);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    m
}

pub fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(0.02..0.98))
}

/// Group-major labels of an `N × m` batch: `label(i + gN) = i + 1`.
pub fn balanced_labels(layout: BatchLayout) -> Vec<ClassId> {
    (0..layout.batch_size())
        .map(|r| (r % layout.classes) as ClassId + 1)
        .collect()
}

pub fn layout(classes: usize, instances: usize) -> BatchLayout {
    BatchLayout { classes, instances }
}

/// Relative error between the tape gradient of `f` at `x` and central
/// differences of its value.
pub fn input_gradient_error(x: &Mat, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = t.input(x.clone());
    let l = f(&mut t, v);
    let g = t.backward(l);
    let analytic = g.wrt(v).cloned().unwrap_or_else(|| Mat::zeros(x.dim()));
    let numeric = central_difference(x, DEFAULT_STEP, |p| {
        let mut t = Tape::new();
        let v = t.input(p.clone());
        let l = f(&mut t, v);
        t.scalar(l)
    });
    relative_error(&analytic, &numeric)
}

/// Small model configuration: `B = 6` (3 classes × 2), `D = 8`, `K = 1`, `H = 2`.
pub fn tiny_config(arm: Ablation) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        steps_per_epoch: Some(3),
        layout: layout(3, 2),
        backbone: BackboneConfig {
            hidden_dims: vec![8],
            embed_dim: 8,
            ..BackboneConfig::default()
        },
        graph: GraphNetConfig {
            steps: 1,
            heads: 2,
            ..GraphNetConfig::default()
        },
        ablation: arm,
        ..TrainConfig::default()
    }
}

pub fn tiny_batch(cfg: &TrainConfig, input_dim: usize, seed: u64) -> LabeledBatch {
    let mut r = rng(seed);
    let labels = balanced_labels(cfg.layout);
    let mut features = gaussian(labels.len(), input_dim, &mut r);
    // Pull each class toward its own center so the batch has structure.
    let centers = gaussian(cfg.layout.classes, input_dim, &mut r);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        row += &(centers.row(labels[i] as usize - 1).to_owned() * 2.0);
    }
    LabeledBatch {
        features,
        indices: (0..labels.len()).collect(),
        labels,
        layout: cfg.layout,
    }
}

pub fn tiny_model(cfg: &TrainConfig, input_dim: usize, classes: usize) -> Model {
    Model::new(cfg, input_dim, classes).expect("tiny model builds")
}

/// Relative error of `analytic` against central differences of `loss`, per
/// parameter of `model` not matched by `skip`.
pub fn model_gradient_error(
    model: &mut Model,
    analytic: &dyn Fn(&Model) -> Vec<(String, Option<Mat>)>,
    loss: &dyn Fn(&Model) -> f64,
    skip: &dyn Fn(&str) -> bool,
) -> Vec<(String, f64)> {
    let grads = analytic(model);
    let mut out = Vec::new();
    let mut k = 0;
    let group_sizes: Vec<usize> = model.groups().iter().map(|(_, p)| p.len()).collect();
    for (gi, &n) in group_sizes.iter().enumerate() {
        for pi in 0..n {
            if skip(&model.groups()[gi].1[pi].name) {
                k += 1;
                continue;
            }
            let shape = model.groups()[gi].1[pi].value.dim();
            let mut numeric = Mat::zeros(shape);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = model.groups()[gi].1[pi].value[[r, c]];
                    model.groups_mut()[gi].1[pi].value[[r, c]] = orig + DEFAULT_STEP;
                    let up = loss(model);
                    model.groups_mut()[gi].1[pi].value[[r, c]] = orig - DEFAULT_STEP;
                    let down = loss(model);
                    model.groups_mut()[gi].1[pi].value[[r, c]] = orig;
                    numeric[[r, c]] = (up - down) / (2.0 * DEFAULT_STEP);
                }
            }
            let (name, g) = &grads[k];
            let a = g.clone().unwrap_or_else(|| Mat::zeros(shape));
            out.push((name.clone(), relative_error(&a, &numeric)));
            k += 1;
        }
    }
    out
}
pub mod oracle;
