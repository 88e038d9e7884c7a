mod common;

use std::fs;

use hng_core::datakit::{make_synthetic, SyntheticDatasetSpec};
use hng_core::trainer::{
    fit, load_checkpoint, load_into, read_manifest, train_step, update_schedules, validate,
    Ablation, FitOptions, Model, RunState, TrainConfig, BLOB_MAGIC,
};
use hng_core::{Error, MetricLossKind};

use common::*;

fn small_dataset() -> hng_core::Dataset {
    make_synthetic(&SyntheticDatasetSpec {
        num_classes: 4,
        samples_per_class: 6,
        input_dim: 5,
        class_center_scale: 6.0,
        seed: 3,
        ..SyntheticDatasetSpec::default()
    })
    .unwrap()
}

#[test]
fn arm_names_round_trip() {
    for arm in Ablation::ALL {
        assert_eq!(arm.name().parse::<Ablation>().unwrap(), arm);
        assert_eq!(arm.to_string(), arm.name());
    }
}

#[test]
fn unknown_arm_lists_valid_arms() {
    let err = "no_such_arm".parse::<Ablation>().unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    for arm in Ablation::ALL {
        assert!(msg.contains(arm.name()), "{msg}");
    }
}

#[test]
fn parameter_groups_follow_the_arm() {
    let expect = [
        (Ablation::Full, vec!["backbone", "gcl", "cacai_fc", "heads"]),
        (Ablation::SingleCoeff, vec!["backbone", "gcl", "heads"]),
        (
            Ablation::NoGlobal,
            vec!["backbone", "gcl", "cacai_fc", "heads"],
        ),
        (Ablation::Baseline, vec!["backbone"]),
        (Ablation::BaselineGnn, vec!["backbone", "gcl", "heads"]),
    ];
    for (arm, groups) in expect {
        let m = tiny_model(&tiny_config(arm), 5, 3);
        assert_eq!(m.group_names(), groups, "{arm}");
    }
    let mut cfg = tiny_config(Ablation::Full);
    cfg.metric_loss = MetricLossKind::ProxyAnchor;
    assert_eq!(
        tiny_model(&cfg, 5, 3).group_names().last(),
        Some(&"proxies")
    );
}

#[test]
fn arms_share_the_backbone_initialization() {
    let full = tiny_model(&tiny_config(Ablation::Full), 5, 3);
    let base = tiny_model(&tiny_config(Ablation::Baseline), 5, 3);
    for (a, b) in full.groups()[0].1.iter().zip(&base.groups()[0].1) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn baseline_step_reports_only_the_metric_loss() {
    let cfg = tiny_config(Ablation::Baseline);
    let batch = tiny_batch(&cfg, 5, 1);
    let mut model = tiny_model(&cfg, 5, 3);
    let mut state = RunState::new(&cfg, 4);
    let (r, trace) = train_step(&mut model, &mut state, &cfg, &batch).unwrap();
    assert!(r.j_gen.is_none() && r.j_gca.is_none() && r.j_syn.is_none() && r.eta.is_none());
    assert_eq!(r.j_m, r.j_r);
    assert!(trace.plan.is_none());
}

#[test]
fn baseline_gnn_adds_node_classification_only() {
    let cfg = tiny_config(Ablation::BaselineGnn);
    let batch = tiny_batch(&cfg, 5, 1);
    let mut model = tiny_model(&cfg, 5, 3);
    let mut state = RunState::new(&cfg, 4);
    let (r, _) = train_step(&mut model, &mut state, &cfg, &batch).unwrap();
    assert!(r.j_gca.is_some() && r.j_syn.is_none() && r.j_gen.is_none());
    assert!((r.j_m - r.j_r - r.j_gca.unwrap()).abs() < 1e-12);
}

#[test]
fn full_step_composes_every_term() {
    let cfg = tiny_config(Ablation::Full);
    let batch = tiny_batch(&cfg, 5, 1);
    let mut model = tiny_model(&cfg, 5, 3);
    let mut state = RunState::new(&cfg, 4);
    let (r, trace) = train_step(&mut model, &mut state, &cfg, &batch).unwrap();
    // First epoch: η is bootstrapped from the batch's own metric loss.
    let eta = (-cfg.alpha_pull / r.j_r).exp();
    assert!((r.eta.unwrap() - eta).abs() < 1e-12);
    assert_eq!(trace.eta, r.eta);
    let g = hng_core::losses::gamma_n(cfg.beta, r.j_gen.unwrap());
    assert!((r.gamma_n.unwrap() - g).abs() < 1e-12);
    let j_m = r.j_r + r.j_gca.unwrap() + (1.0 - g) * r.j_syn.unwrap();
    assert!((r.j_m - j_m).abs() < 1e-12);
    let w = cfg.stage1_weights();
    assert!(r.j_ce.unwrap() > 0.0 && r.j_sim.unwrap() >= 0.0 && r.j_div.unwrap() <= 1.0);
    assert!(w.gamma_d == 0.03);
}

#[test]
fn eta_is_frozen_per_epoch() {
    let cfg = tiny_config(Ablation::Full);
    let mut model = tiny_model(&cfg, 5, 3);
    let mut state = RunState::new(&cfg, 10);
    let mut sum = 0.0;
    for s in 0..3 {
        let (r, _) = train_step(&mut model, &mut state, &cfg, &tiny_batch(&cfg, 5, s)).unwrap();
        sum += r.j_r;
    }
    update_schedules(&mut state, &cfg);
    let mean = sum / 3.0;
    assert!((state.j_avg.unwrap() - mean).abs() < 1e-12);
    let frozen = (-cfg.alpha_pull / mean).exp();
    for s in 0..2 {
        let (r, _) =
            train_step(&mut model, &mut state, &cfg, &tiny_batch(&cfg, 5, 10 + s)).unwrap();
        assert_eq!(r.eta, Some(frozen));
    }
}

#[test]
fn proxy_anchor_arm_moves_the_proxies() {
    let mut cfg = tiny_config(Ablation::Full);
    cfg.metric_loss = MetricLossKind::ProxyAnchor;
    let mut model = tiny_model(&cfg, 5, 3);
    let before = model.proxies.clone().unwrap().proxies.value;
    let mut state = RunState::new(&cfg, 4);
    train_step(&mut model, &mut state, &cfg, &tiny_batch(&cfg, 5, 2)).unwrap();
    assert_ne!(model.proxies.unwrap().proxies.value, before);
}

#[test]
fn non_finite_input_aborts_with_numeric_error() {
    let cfg = tiny_config(Ablation::Full);
    let mut batch = tiny_batch(&cfg, 5, 1);
    batch.features[[0, 0]] = f64::NAN;
    let mut model = tiny_model(&cfg, 5, 3);
    let mut state = RunState::new(&cfg, 4);
    let err = train_step(&mut model, &mut state, &cfg, &batch).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn invalid_config_names_the_field() {
    let mut cfg = TrainConfig::default();
    cfg.gamma_d = Some(-1.0);
    assert!(cfg.validate().unwrap_err().to_string().contains("gamma_d"));
    let mut cfg = TrainConfig::default();
    cfg.graph.heads = 3;
    assert!(cfg
        .validate()
        .unwrap_err()
        .to_string()
        .contains("graph.heads"));
    let mut cfg = TrainConfig::default();
    cfg.graph.steps = 0;
    assert!(cfg
        .validate()
        .unwrap_err()
        .to_string()
        .contains("graph.steps"));
}

#[test]
fn checkpoint_round_trip_reproduces_embeddings() {
    let ds = small_dataset();
    let (train, val) = ds.split_holdout(0.25, 0).unwrap();
    let cfg = tiny_config(Ablation::Full);
    let tmp = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        eval_ks: vec![1, 2],
        patience: None,
        ..FitOptions::default()
    };
    let out = fit(&train, Some(&val), &cfg, &opts).unwrap();
    let dir = tmp.path().join("checkpoints").join("epoch_002");
    let (manifest, model) = load_checkpoint(&dir).unwrap();
    assert_eq!(manifest.epoch, 2);
    assert!(manifest.matches_config(&cfg));
    assert_eq!(manifest.group_names(), out.model.group_names());
    assert_eq!(manifest.metric_history, out.history);
    let x = val.feature_matrix();
    assert_eq!(model.embed(&x).unwrap(), out.model.embed(&x).unwrap());
    let report = validate(&model, &val, &[1, 2]).unwrap();
    assert_eq!(
        Some(&report),
        out.history.last().unwrap().validation.as_ref()
    );
}

#[test]
fn zero_epochs_write_only_the_initial_checkpoint() {
    let ds = small_dataset();
    let mut cfg = tiny_config(Ablation::Full);
    cfg.epochs = 0;
    let tmp = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        ..FitOptions::default()
    };
    let out = fit(&ds, None, &cfg, &opts).unwrap();
    assert!(out.history.is_empty() && out.log.is_empty());
    let dirs: Vec<String> = fs::read_dir(tmp.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(dirs, vec!["epoch_000".to_string()]);
    let (_, model) = load_checkpoint(&tmp.path().join("checkpoints/epoch_000")).unwrap();
    let fresh = Model::new(&cfg, ds.dim(), ds.num_classes() as usize).unwrap();
    let x = ds.feature_matrix();
    assert_eq!(model.embed(&x).unwrap(), fresh.embed(&x).unwrap());
    assert_eq!(
        fs::read_to_string(tmp.path().join("train_log.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn zero_patience_stops_after_one_epoch() {
    let ds = small_dataset();
    let (train, val) = ds.split_holdout(0.25, 0).unwrap();
    let cfg = tiny_config(Ablation::Baseline);
    let opts = FitOptions {
        patience: Some(0),
        ..FitOptions::default()
    };
    let out = fit(&train, Some(&val), &cfg, &opts).unwrap();
    assert_eq!(out.history.len(), 1);
}

fn saved_checkpoint(arm: Ablation) -> (tempfile::TempDir, std::path::PathBuf) {
    let ds = small_dataset();
    let mut cfg = tiny_config(arm);
    cfg.epochs = 0;
    let tmp = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        ..FitOptions::default()
    };
    fit(&ds, None, &cfg, &opts).unwrap();
    let dir = tmp.path().join("checkpoints/epoch_000");
    (tmp, dir)
}

#[test]
fn corrupted_magic_is_rejected() {
    let (_tmp, dir) = saved_checkpoint(Ablation::Full);
    let blob = dir.join("gcl.bin");
    let mut bytes = fs::read(&blob).unwrap();
    assert_eq!(&bytes[..4], BLOB_MAGIC);
    bytes[0] = b'X';
    fs::write(&blob, bytes).unwrap();
    let err = load_checkpoint(&dir).unwrap_err();
    assert!(err.to_string().contains("bad magic"), "{err}");
}

#[test]
fn truncated_blob_is_rejected() {
    let (_tmp, dir) = saved_checkpoint(Ablation::Full);
    let blob = dir.join("backbone.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&dir)
        .unwrap_err()
        .to_string()
        .contains("truncated"));
}

#[test]
fn newer_manifest_version_is_rejected() {
    let (_tmp, dir) = saved_checkpoint(Ablation::Full);
    let path = dir.join("manifest.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["version"] = serde_json::json!(99);
    fs::write(&path, v.to_string()).unwrap();
    let err = read_manifest(&dir).unwrap_err();
    assert!(
        matches!(err, Error::CheckpointVersion { found: 99, .. }),
        "{err}"
    );
}

#[test]
fn cross_arm_load_is_rejected() {
    let (_tmp, dir) = saved_checkpoint(Ablation::Full);
    let mut other = tiny_model(&tiny_config(Ablation::BaselineGnn), 4, 4);
    let err = load_into(&dir, &mut other).unwrap_err();
    assert!(err.to_string().contains("parameter groups differ"), "{err}");
}

#[test]
fn shape_mismatch_is_rejected() {
    let (_tmp, dir) = saved_checkpoint(Ablation::Baseline);
    let mut cfg = tiny_config(Ablation::Baseline);
    cfg.backbone.hidden_dims = vec![6];
    let mut other = tiny_model(&cfg, 5, 4);
    assert!(matches!(
        load_into(&dir, &mut other).unwrap_err(),
        Error::Shape { .. }
    ));
}
