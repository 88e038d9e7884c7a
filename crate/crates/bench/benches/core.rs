use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hng_core::datakit::{make_synthetic, sample_balanced};
use hng_core::evalkit::evaluate;
use hng_core::trainer::{train_step, RunState};
use hng_core::{Ablation, GraphNet, Model, RetrievalIndex, RunConfig, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph_forward(c: &mut Criterion) {
    let cfg = RunConfig::bundled_synthetic();
    let ds = make_synthetic(&cfg.data.synthetic).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = cfg.train.backbone.embed_dim;
    let graph = GraphNet::new(cfg.train.graph.clone(), d, &mut rng).unwrap();
    let model = Model::new(&cfg.train, ds.dim(), ds.num_classes() as usize).unwrap();
    let mut group = c.benchmark_group("graph_forward");
    for (n, m) in [(4, 3), (8, 3)] {
        let layout = hng_core::BatchLayout::new(n, m).unwrap();
        let batch = sample_balanced(&ds, layout, &mut rng).unwrap();
        let z = model.embed(&batch.features).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n * m), &z, |b, z| {
            b.iter(|| {
                let mut t = Tape::new();
                let zv = t.constant(z.clone());
                let (g, _) = graph.forward(&mut t, zv, &batch.labels).unwrap();
                black_box(t.value(g.edges).sum())
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let base = RunConfig::bundled_synthetic();
    let (train, _) = base.data.load_split().unwrap();
    let mut group = c.benchmark_group("train_step");
    for arm in [Ablation::Baseline, Ablation::BaselineGnn, Ablation::Full] {
        let mut cfg = base.train.clone();
        cfg.ablation = arm;
        let mut model = Model::new(&cfg, train.dim(), train.num_classes() as usize).unwrap();
        let mut state = RunState::new(&cfg, 1_000_000);
        group.bench_function(arm.name(), |b| {
            b.iter(|| {
                let batch = sample_balanced(&train, cfg.layout, &mut state.data_rng).unwrap();
                black_box(
                    train_step(&mut model, &mut state, &cfg, &batch)
                        .unwrap()
                        .0
                        .j_m,
                )
            })
        });
    }
    group.finish();
}

fn retrieval_metrics(c: &mut Criterion) {
    let cfg = RunConfig::bundled_synthetic();
    let ds = make_synthetic(&cfg.data.synthetic).unwrap();
    let model = Model::new(&cfg.train, ds.dim(), ds.num_classes() as usize).unwrap();
    let z = model.embed(&ds.feature_matrix()).unwrap();
    let labels = ds.labels();
    c.bench_function("retrieval_400", |b| {
        b.iter(|| {
            let index = RetrievalIndex::single_set(&z, &labels).unwrap();
            black_box(evaluate(&index, &[1, 2, 4, 8]).unwrap())
        })
    });
}

criterion_group!(benches, graph_forward, training_step, retrieval_metrics);
criterion_main!(benches);
