//! Mini-batch SGD with a stepped learning-rate schedule, layer freezing,
//! per-layer learning-rate scaling, and a same-domain mini-batch guarantee
//! when training on several domains at once.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::data::{DataError, DomainDataset};
use crate::layers::{softmax_cross_entropy, softmax_cross_entropy_grad, BnMode, LayerError};
use crate::model::{Model, ModelError};
use crate::rng::{derive_seed, derive_seed_indexed, seeded_permutation};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("domain '{0}' has no labels; this operation needs labeled data")]
    Unlabeled(String),
    #[error("no training domains given")]
    NoDomains,
    #[error("domains disagree on class count: {0} vs {1}")]
    ClassCountMismatch(usize, usize),
    #[error("domain '{domain}' yields no usable mini-batches ({got} training samples)")]
    TooFewSamples { domain: String, got: usize },
}

/// SGD hyperparameters. The learning rate at epoch e is
/// `base_lr * lr_drop_factor^floor(e / lr_drop_every)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub frozen_layers: Vec<String>,
    pub per_layer_lr_scale: HashMap<String, f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(TrainError::Config(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return Err(TrainError::Config(format!(
                "lr_drop_factor {} must lie in (0, 1)",
                self.lr_drop_factor
            )));
        }
        if self.lr_drop_every == 0 {
            return Err(TrainError::Config(
                "lr_drop_every must be at least 1".to_string(),
            ));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch_size {} too small; batch-mode normalization needs at least 2",
                self.batch_size
            )));
        }
        if let Some((name, &s)) = self
            .per_layer_lr_scale
            .iter()
            .find(|(_, &s)| s.is_nan() || s <= 0.0)
        {
            return Err(TrainError::Config(format!(
                "per_layer_lr_scale['{name}'] = {s} must be positive"
            )));
        }
        Ok(())
    }

    /// Closed-form stepped schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_drop_factor.powi((epoch / self.lr_drop_every) as i32)
    }
}

/// One epoch's log line. Validation fields are absent when the split is
/// empty (fewer than ten samples per domain).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Line-delimited training log: a header row, then one tab-separated row per
/// epoch with `epoch`, `lr`, `loss`, `accuracy`, `val_loss`, `val_accuracy`
/// (`-` when a validation column is absent).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_table(&self) -> String {
        let mut out = String::from("epoch\tlr\tloss\taccuracy\tval_loss\tval_accuracy\n");
        for r in &self.records {
            let vl = r
                .val_loss
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".to_string());
            let va = r
                .val_accuracy
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".to_string());
            let _ = writeln!(
                out,
                "{}\t{:.8}\t{:.6}\t{:.6}\t{}\t{}",
                r.epoch, r.lr, r.loss, r.accuracy, vl, va
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Per-class slice of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClass {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
}

impl PerClass {
    pub fn accuracy(&self) -> Option<f64> {
        if self.count == 0 {
            None
        } else {
            Some(self.correct as f64 / self.count as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class: Vec<PerClass>,
    pub sample_count: usize,
}

/// Deterministic train/validation row split: 10% of each domain's rows
/// (rounded down) go to validation, chosen by a seeded permutation.
pub fn validation_split(n: usize, domain_id: &str, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = seeded_permutation(n, derive_seed(seed, &format!("val-split:{domain_id}")));
    let val_n = n / 10;
    let val = perm[..val_n].to_vec();
    let train = perm[val_n..].to_vec();
    (train, val)
}

/// A mini-batch drawn from exactly one domain.
struct DomainBatch {
    domain_index: usize,
    rows: Vec<usize>,
}

/// Epoch batch plan: per-domain shuffles chunked to the batch size, then
/// interleaved round-robin across domains. Every batch holds rows of a
/// single domain; chunks of fewer than two rows are dropped because
/// batch-mode normalization cannot use them.
fn plan_epoch_batches(
    train_rows: &[Vec<usize>],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<DomainBatch> {
    let mut per_domain: Vec<Vec<Vec<usize>>> = Vec::with_capacity(train_rows.len());
    for (d, rows) in train_rows.iter().enumerate() {
        let order = seeded_permutation(
            rows.len(),
            derive_seed_indexed(seed, &format!("shuffle:{d}"), epoch as u64),
        );
        let shuffled: Vec<usize> = order.into_iter().map(|i| rows[i]).collect();
        let chunks: Vec<Vec<usize>> = shuffled
            .chunks(batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect();
        per_domain.push(chunks);
    }
    let max_chunks = per_domain.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut plan = Vec::new();
    for i in 0..max_chunks {
        for (d, chunks) in per_domain.iter().enumerate() {
            if let Some(rows) = chunks.get(i) {
                plan.push(DomainBatch {
                    domain_index: d,
                    rows: rows.clone(),
                });
            }
        }
    }
    plan
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Train on one or more labeled domains. Each mini-batch is drawn from a
/// single domain; domains are interleaved round-robin within an epoch. The
/// returned model has its normalization layers in eval mode.
pub fn train(
    mut model: Model,
    domains: &[DomainDataset],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(TrainError::NoDomains);
    }
    let class_count = domains[0].class_count;
    for d in domains {
        if d.labels.is_none() {
            return Err(TrainError::Unlabeled(d.domain_id.clone()));
        }
        if d.class_count != class_count {
            return Err(TrainError::ClassCountMismatch(class_count, d.class_count));
        }
    }
    let mut train_rows = Vec::with_capacity(domains.len());
    let mut val_rows = Vec::with_capacity(domains.len());
    for d in domains {
        let (tr, va) = validation_split(d.sample_count(), &d.domain_id, cfg.seed);
        if tr.len() < 2 {
            return Err(TrainError::TooFewSamples {
                domain: d.domain_id.clone(),
                got: tr.len(),
            });
        }
        train_rows.push(tr);
        val_rows.push(va);
    }

    model.set_bn_mode(BnMode::Train);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let plan = plan_epoch_batches(&train_rows, cfg.batch_size, cfg.seed, epoch);
        debug_assert!(!plan.is_empty());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in &plan {
            let domain = &domains[batch.domain_index];
            let sub = domain.select(&batch.rows)?;
            let labels = sub.labels.as_ref().expect("validated labeled");
            let (logits, caches) = model.forward_train(&sub.inputs)?;
            let (loss, probs) = softmax_cross_entropy(&logits, labels)?;
            let dlogits = softmax_cross_entropy_grad(&probs, labels)?;
            let (_, grads) = model.backward(&dlogits, &caches)?;
            model.sgd_step(&grads, lr, &cfg.frozen_layers, &cfg.per_layer_lr_scale)?;
            loss_sum += loss * batch.rows.len() as f64;
            seen += batch.rows.len();
            let k = logits.shape()[1];
            for (i, &label) in labels.iter().enumerate() {
                if argmax_row(&logits.data()[i * k..(i + 1) * k]) == label {
                    correct += 1;
                }
            }
        }
        let (val_loss, val_accuracy) = eval_rows(&model, domains, &val_rows)?;
        log.records.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
        });
    }
    model.set_bn_mode(BnMode::Eval);
    Ok(TrainOutcome { model, log })
}

/// Validation metrics over the given rows of each domain; `(None, None)`
/// when every split is empty.
fn eval_rows(
    model: &Model,
    domains: &[DomainDataset],
    rows: &[Vec<usize>],
) -> Result<(Option<f64>, Option<f64>), TrainError> {
    let total: usize = rows.iter().map(|r| r.len()).sum();
    if total == 0 {
        return Ok((None, None));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (d, r) in domains.iter().zip(rows) {
        if r.is_empty() {
            continue;
        }
        let sub = d.select(r)?;
        let labels = sub.labels.as_ref().expect("validated labeled");
        let logits = model.forward_eval(&sub.inputs)?;
        let (loss, _) = softmax_cross_entropy(&logits, labels)?;
        loss_sum += loss * r.len() as f64;
        let k = logits.shape()[1];
        for (i, &label) in labels.iter().enumerate() {
            if argmax_row(&logits.data()[i * k..(i + 1) * k]) == label {
                correct += 1;
            }
        }
    }
    Ok((
        Some(loss_sum / total as f64),
        Some(correct as f64 / total as f64),
    ))
}

/// Continue training on labeled data from one domain, typically after a
/// statistics swap. Zero epochs returns the model unchanged.
pub fn fine_tune(
    model: Model,
    labeled_target: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train(model, std::slice::from_ref(labeled_target), cfg)
}

/// Eval-mode metrics on labeled data: accuracy, mean cross-entropy, and a
/// per-class breakdown. The model's normalization layers consume their
/// stored statistics, so results are deterministic and batch-independent.
pub fn evaluate(model: &Model, data: &DomainDataset) -> Result<Metrics, TrainError> {
    if data.labels.is_none() {
        return Err(TrainError::Unlabeled(data.domain_id.clone()));
    }
    let n = data.sample_count();
    let mut per_class: Vec<PerClass> = (0..data.class_count)
        .map(|class| PerClass {
            class,
            count: 0,
            correct: 0,
        })
        .collect();
    let batch = 256;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let sub = data.select(&rows)?;
        let sub_labels = sub.labels.as_ref().expect("labels present");
        let logits = model.forward_eval(&sub.inputs)?;
        let (loss, _) = softmax_cross_entropy(&logits, sub_labels)?;
        loss_sum += loss * rows.len() as f64;
        let k = logits.shape()[1];
        for (i, &label) in sub_labels.iter().enumerate() {
            per_class[label].count += 1;
            if argmax_row(&logits.data()[i * k..(i + 1) * k]) == label {
                per_class[label].correct += 1;
                correct += 1;
            }
        }
        start = end;
    }
    Ok(Metrics {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
        per_class,
        sample_count: n,
    })
}
