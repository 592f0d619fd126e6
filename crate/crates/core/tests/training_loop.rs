//! Training-harness behavior on small synthetic feature sets.

mod common;

use common::{random_features, reduced_model_config, tiny_model_config};
use dualcycon::model::ModelConfig;
use dualcycon::signal_io::MeasurementFeatures;
use dualcycon::training::{evaluate, run_cross_validation, train_fold, TrainConfig};

/// Separable toy set: damaged measurements carry a strong constant offset in
/// one peak row of every matrix.
fn separable_features(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<MeasurementFeatures> {
    (0..n)
        .map(|i| {
            let label = u8::from(i % 2 == 0);
            let mut f = random_features(cfg, label, seed + i as u64);
            if label == 1 {
                for m in [&mut f.td_pos, &mut f.td_neg] {
                    for v in m.row_mut(0) {
                        *v = 0.95;
                    }
                }
                for m in [&mut f.fd_pos, &mut f.fd_neg] {
                    for v in m.row_mut(0) {
                        *v = 0.95;
                    }
                }
            }
            f
        })
        .collect()
}

fn quick_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        epochs: 3,
        folds: 2,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn fold_training_is_deterministic() {
    let model_cfg = tiny_model_config();
    let features = separable_features(12, &model_cfg, 100);
    let cfg = quick_train_config();

    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let train: Vec<usize> = (0..8).collect();
    let val: Vec<usize> = (8..12).collect();
    let r1 = train_fold(0, &train, &val, &features, &model_cfg, &cfg, dir1.path()).unwrap();
    let r2 = train_fold(0, &train, &val, &features, &model_cfg, &cfg, dir2.path()).unwrap();
    assert_eq!(r1.history, r2.history, "histories must be bit-identical");

    // And the persisted history files byte-match.
    let h1 = std::fs::read(dir1.path().join("history_fold_0.csv")).unwrap();
    let h2 = std::fs::read(dir2.path().join("history_fold_0.csv")).unwrap();
    assert_eq!(h1, h2);
}

#[test]
fn lambda_toggles_history() {
    let model_cfg = tiny_model_config();
    let features = separable_features(12, &model_cfg, 200);
    let cfg = quick_train_config();
    let train: Vec<usize> = (0..8).collect();
    let val: Vec<usize> = (8..12).collect();

    let dir = tempfile::tempdir().unwrap();
    let with_cc =
        train_fold(0, &train, &val, &features, &model_cfg, &cfg, dir.path()).unwrap();
    let no_cc_cfg = ModelConfig { lambda: 0.0, ..model_cfg.clone() };
    let without_cc =
        train_fold(0, &train, &val, &features, &no_cc_cfg, &cfg, dir.path()).unwrap();

    assert_ne!(
        with_cc.history[0].l_total, without_cc.history[0].l_total,
        "cycle-consistency weight must change the optimized loss"
    );
    // The consistency terms are still reported under lambda = 0.
    assert!(without_cc.history[0].l_ct > 0.0);
}

#[test]
fn checkpoint_best_is_running_maximum() {
    let model_cfg = tiny_model_config();
    let features = separable_features(12, &model_cfg, 300);
    let cfg = TrainConfig { epochs: 6, ..quick_train_config() };
    let dir = tempfile::tempdir().unwrap();
    let train: Vec<usize> = (0..8).collect();
    let val: Vec<usize> = (8..12).collect();
    let result = train_fold(0, &train, &val, &features, &model_cfg, &cfg, dir.path()).unwrap();

    let running_max = result
        .history
        .iter()
        .map(|e| e.val_mcc)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(result.best_val_mcc, running_max);
    assert!(result.checkpoint_path.exists());
}

#[test]
fn cross_validation_trains_every_fold() {
    let model_cfg = tiny_model_config();
    let features = separable_features(12, &model_cfg, 400);
    let cfg = quick_train_config();
    let dir = tempfile::tempdir().unwrap();
    let results = run_cross_validation(&features, &model_cfg, &cfg, dir.path()).unwrap();
    assert_eq!(results.len(), 2);
    for r in &results {
        assert!(r.checkpoint_path.exists());
        assert_eq!(r.history.len(), cfg.epochs);
        assert!(dir
            .path()
            .join(format!("history_fold_{}.csv", r.fold_id))
            .exists());
    }
}

#[test]
fn evaluate_single_fold_equals_its_own_predictions() {
    let model_cfg = tiny_model_config();
    let features = separable_features(10, &model_cfg, 500);
    let cfg = quick_train_config();
    let dir = tempfile::tempdir().unwrap();
    let train: Vec<usize> = (0..6).collect();
    let val: Vec<usize> = (6..10).collect();
    let fold = train_fold(0, &train, &val, &features, &model_cfg, &cfg, dir.path()).unwrap();

    let single = evaluate(
        std::slice::from_ref(&fold.checkpoint_path),
        &features,
        &model_cfg,
        0.5,
        4,
    )
    .unwrap();
    assert_eq!(single.per_fold.len(), 1);
    // The ensemble of one model scores exactly like that model.
    assert_eq!(single.overall.mcc, single.per_fold[0].mcc);

    // Duplicating the checkpoint changes nothing: the mean of identical
    // probabilities is the probability.
    let duplicated = evaluate(
        &[fold.checkpoint_path.clone(), fold.checkpoint_path.clone()],
        &features,
        &model_cfg,
        0.5,
        4,
    )
    .unwrap();
    assert_eq!(duplicated.confusion, single.confusion);
    assert_eq!(duplicated.overall.mcc, single.overall.mcc);
}

#[test]
fn evaluate_without_checkpoints_is_an_error() {
    let model_cfg = tiny_model_config();
    let features = separable_features(4, &model_cfg, 600);
    assert!(matches!(
        evaluate(&[], &features, &model_cfg, 0.5, 4),
        Err(dualcycon::training::TrainingError::MissingCheckpoint)
    ));
}

#[test]
fn overfits_a_tiny_separable_set() {
    // Loss should fall and training MCC reach 1.0 within a few epochs on a
    // trivially separable set.
    let model_cfg = reduced_model_config();
    let features = separable_features(12, &model_cfg, 700);
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        epochs: 25,
        folds: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let train: Vec<usize> = (0..8).collect();
    let val: Vec<usize> = (8..12).collect();
    let result = train_fold(0, &train, &val, &features, &model_cfg, &cfg, dir.path()).unwrap();
    let first = result.history.first().unwrap().l_total;
    let last = result.history.last().unwrap().l_total;
    assert!(last < first, "loss did not decrease: {first} -> {last}");
    assert_eq!(result.best_val_mcc, 1.0);
}
