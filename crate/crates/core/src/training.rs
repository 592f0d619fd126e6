//! Stratified k-fold training with checkpointing on validation MCC, and
//! fold-averaged evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::metrics::{self, ConfusionCounts, PositiveClass};
use crate::model::{
    compute_losses, predict, DualCyConNet, ModelConfig, ModelError,
};
use crate::signal_io::MeasurementFeatures;
use crate::tensor::{
    read_checkpoint, write_checkpoint, AdamConfig, CheckpointError, Graph, Mode, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("class {class} has {count} samples, fewer than {folds} folds")]
    ClassTooSmall { class: u8, count: usize, folds: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no checkpoints given")]
    MissingCheckpoint,
    #[error("fold {fold} epoch {epoch}: {detail}")]
    NumericFailure { fold: usize, epoch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    /// Decision threshold on the final probability.
    pub threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            epochs: 50,
            folds: 5,
            seed: 42,
            threshold: 0.5,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.folds < 2 {
            return Err(TrainingError::InvalidConfig("folds must be at least 2".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr <= 0.0 {
            return Err(TrainingError::InvalidConfig(
                "batch_size, epochs, and lr must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Losses and validation score of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_ct: f64,
    pub l_cf: f64,
    pub l_total: f64,
    pub val_mcc: f64,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold_id: usize,
    pub checkpoint_path: PathBuf,
    pub history: Vec<EpochStats>,
    pub best_val_mcc: f64,
}

/// Splits indices into `k` folds, dealing each class round-robin after a
/// seeded shuffle, so per-fold class counts differ from the global ratio by
/// at most one sample.
pub fn stratified_kfold(
    labels: &[u8],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, TrainingError> {
    if k < 2 {
        return Err(TrainingError::InvalidConfig("need at least 2 folds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < k {
            return Err(TrainingError::ClassTooSmall { class, count: idx.len(), folds: k });
        }
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            folds[pos % k].push(i);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

fn fold_seed(seed: u64, fold_id: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold_id as u64 + 1))
}

/// Eval-mode final probabilities for the given indices, in their order.
pub fn predict_set(
    model: &mut DualCyConNet,
    features: &[MeasurementFeatures],
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>, TrainingError> {
    let mut probs = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch: Vec<&MeasurementFeatures> = chunk.iter().map(|&i| &features[i]).collect();
        let mut graph = Graph::new();
        let pass = model.forward(&mut graph, &batch, Mode::Eval)?;
        probs.extend(predict(&graph, &pass.outputs));
    }
    Ok(probs)
}

/// Trains one fold: seeded shuffled mini-batches, Adam on the total loss,
/// validation MCC after every epoch, checkpoint persisted on improvement.
pub fn train_fold(
    fold_id: usize,
    train_idx: &[usize],
    val_idx: &[usize],
    features: &[MeasurementFeatures],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FoldResult, TrainingError> {
    cfg.validate()?;
    debug_assert!(
        train_idx.iter().all(|i| !val_idx.contains(i)),
        "train and validation indices overlap"
    );
    fs::create_dir_all(out_dir)?;

    let seed = fold_seed(cfg.seed, fold_id);
    let mut model = DualCyConNet::new(model_cfg.clone(), seed)?;
    let adam = cfg.adam();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5155_4646_4c45_5252);
    let checkpoint_path = out_dir.join(format!("fold_{fold_id}.ckpt"));

    let val_labels: Vec<u8> = val_idx.iter().map(|&i| features[i].label).collect();
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4]; // l_cls, l_ct, l_cf, l_total
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MeasurementFeatures> = chunk.iter().map(|&i| &features[i]).collect();
            let labels: Vec<f64> = chunk.iter().map(|&i| features[i].label as f64).collect();
            let mut graph = Graph::new();
            let pass = model.forward(&mut graph, &batch, Mode::Train)?;
            let losses = compute_losses(&mut graph, &pass.outputs, &labels, model_cfg.lambda)?;
            let values = losses.values(&graph);
            if !values.l_total.is_finite() {
                return Err(TrainingError::NumericFailure {
                    fold: fold_id,
                    epoch,
                    detail: format!("non-finite total loss {}", values.l_total),
                });
            }
            graph.backward(losses.l_total);
            model.apply_grads(&graph, &pass, &adam);

            let w = chunk.len() as f64;
            sums[0] += values.l_cls * w;
            sums[1] += values.l_ct * w;
            sums[2] += values.l_cf * w;
            sums[3] += values.l_total * w;
            seen += chunk.len();
        }

        let val_probs = predict_set(&mut model, features, val_idx, cfg.batch_size)?;
        let confusion = metrics::confusion(&val_probs, &val_labels, cfg.threshold)?;
        let val_mcc = metrics::mcc(confusion);

        let n = seen as f64;
        history.push(EpochStats {
            epoch,
            l_cls: sums[0] / n,
            l_ct: sums[1] / n,
            l_cf: sums[2] / n,
            l_total: sums[3] / n,
            val_mcc,
        });
        if val_mcc > best {
            best = val_mcc;
            write_checkpoint(&checkpoint_path, &model.to_checkpoint(fold_id as u32, seed))?;
        }
    }

    write_history_csv(&out_dir.join(format!("history_fold_{fold_id}.csv")), &history)?;
    Ok(FoldResult { fold_id, checkpoint_path, history, best_val_mcc: best })
}

/// `epoch,l_cls,l_ct,l_cf,l_total,val_mcc` per line.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<(), std::io::Error> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,l_cls,l_ct,l_cf,l_total,val_mcc")?;
    for e in history {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            e.epoch, e.l_cls, e.l_ct, e.l_cf, e.l_total, e.val_mcc
        )?;
    }
    Ok(())
}

/// Runs every fold of a stratified k-fold split sequentially.
pub fn run_cross_validation(
    features: &[MeasurementFeatures],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Vec<FoldResult>, TrainingError> {
    cfg.validate()?;
    let labels: Vec<u8> = features.iter().map(|f| f.label).collect();
    let folds = stratified_kfold(&labels, cfg.folds, cfg.seed)?;
    let mut results = Vec::with_capacity(folds.len());
    for fold_id in 0..folds.len() {
        let val_idx = &folds[fold_id];
        let train_idx: Vec<usize> = (0..folds.len())
            .filter(|&f| f != fold_id)
            .flat_map(|f| folds[f].iter().copied())
            .collect();
        results.push(train_fold(
            fold_id, &train_idx, val_idx, features, model_cfg, cfg, out_dir,
        )?);
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverallReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FoldReport {
    pub fold_id: u32,
    pub mcc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Fold-averaged evaluation: per-class precision/recall/F1, macro-averaged
/// overall row with MCC, plus each individual fold's PD-class scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
    pub pd_signals: ClassReport,
    pub non_pd_signals: ClassReport,
    pub overall: OverallReport,
    pub per_fold: Vec<FoldReport>,
}

fn class_report(c: ConfusionCounts, positive: PositiveClass) -> ClassReport {
    let prf = metrics::precision_recall_f1(c, positive);
    ClassReport { precision: prf.precision, recall: prf.recall, f1: prf.f1 }
}

/// Loads each fold's best checkpoint, averages the per-measurement final
/// probabilities over folds, and scores the ensemble at `threshold`.
pub fn evaluate(
    checkpoints: &[PathBuf],
    features: &[MeasurementFeatures],
    model_cfg: &ModelConfig,
    threshold: f64,
    batch_size: usize,
) -> Result<EvalReport, TrainingError> {
    if checkpoints.is_empty() {
        return Err(TrainingError::MissingCheckpoint);
    }
    let labels: Vec<u8> = features.iter().map(|f| f.label).collect();
    let indices: Vec<usize> = (0..features.len()).collect();

    let mut mean_probs = vec![0.0f64; features.len()];
    let mut per_fold = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let ckpt = read_checkpoint(path)?;
        let mut model = DualCyConNet::from_checkpoint(model_cfg.clone(), &ckpt)?;
        let probs = predict_set(&mut model, features, &indices, batch_size)?;
        let confusion = metrics::confusion(&probs, &labels, threshold)?;
        let prf = metrics::precision_recall_f1(confusion, PositiveClass::Pd);
        per_fold.push(FoldReport {
            fold_id: ckpt.fold_id,
            mcc: metrics::mcc(confusion),
            f1: prf.f1,
            precision: prf.precision,
            recall: prf.recall,
        });
        for (acc, p) in mean_probs.iter_mut().zip(&probs) {
            *acc += p;
        }
    }
    let k = checkpoints.len() as f64;
    for p in &mut mean_probs {
        *p /= k;
    }

    let confusion = metrics::confusion(&mean_probs, &labels, threshold)?;
    let macro_prf = metrics::macro_average(confusion);
    Ok(EvalReport {
        n_samples: features.len(),
        threshold,
        confusion,
        pd_signals: class_report(confusion, PositiveClass::Pd),
        non_pd_signals: class_report(confusion, PositiveClass::NonPd),
        overall: OverallReport {
            precision: macro_prf.precision,
            recall: macro_prf.recall,
            f1: macro_prf.f1,
            mcc: metrics::mcc(confusion),
        },
        per_fold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_kfold_balances_classes_exactly_when_divisible() {
        let labels = [1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        let folds = stratified_kfold(&labels, 5, 9).unwrap();
        assert_eq!(folds.len(), 5);
        for fold in &folds {
            assert_eq!(fold.len(), 2);
            let pos = fold.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 1);
        }
    }

    #[test]
    fn stratified_kfold_partitions_the_index_set() {
        let labels: Vec<u8> = (0..103).map(|i| u8::from(i % 4 == 0)).collect();
        let folds = stratified_kfold(&labels, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_kfold_matches_dataset_scale_counting() {
        // 2324 samples of which 434 are positive, five folds: positive counts
        // land on 86 or 87 per fold.
        let labels: Vec<u8> = (0..2324).map(|i| u8::from(i < 434)).collect();
        let folds = stratified_kfold(&labels, 5, 33).unwrap();
        for fold in &folds {
            let pos = fold.iter().filter(|&&i| labels[i] == 1).count();
            assert!(pos == 86 || pos == 87, "positive count {pos}");
        }
    }

    #[test]
    fn stratified_kfold_is_deterministic_per_seed() {
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
        assert_eq!(
            stratified_kfold(&labels, 4, 5).unwrap(),
            stratified_kfold(&labels, 4, 5).unwrap()
        );
        assert_ne!(
            stratified_kfold(&labels, 4, 5).unwrap(),
            stratified_kfold(&labels, 4, 6).unwrap()
        );
    }

    #[test]
    fn stratified_kfold_rejects_tiny_classes() {
        let labels = [1, 0, 0, 0, 0, 0];
        assert!(matches!(
            stratified_kfold(&labels, 2, 0),
            Err(TrainingError::ClassTooSmall { class: 1, count: 1, folds: 2 })
        ));
    }
}
