//! SGD with classical momentum and decoupled-from-BN weight decay, cosine
//! annealing per epoch, cross-entropy loss and accuracy evaluation.
//!
//! The reference path is single-threaded and bit-reproducible for a fixed
//! seed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::Clock;
use crate::data::{batches, AugmentConfig, Cifar10Set, DataError, NormStats};
use crate::models::{ModelError, ModelGraph, ModelState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} is outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in parameter {index}; step rejected")]
    NonFiniteGradient { index: usize },
    #[error("training diverged at epoch {epoch}, batch {batch} (non-finite loss); parameters restored to the last completed epoch")]
    Diverged { epoch: usize, batch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = core::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train on the first `n` training images and evaluate on the first `n`
    /// test images.
    pub subset_size: Option<usize>,
}

impl Default for TrainConfig {
    /// 100 epochs, lr 0.1, momentum 0.9, weight decay 5e-4, batch 128, seed 42.
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            seed: 42,
            subset_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !(self.momentum > 0.0) || !(self.weight_decay > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate, momentum and weight decay must be positive".into()));
        }
        if self.subset_size == Some(0) {
            return Err(TrainError::InvalidConfig("subset_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `base_lr · ½ (1 + cos(π · epoch / epochs))`, for 0-based `epoch`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange { epoch, epochs: cfg.epochs });
    }
    let phase = core::f64::consts::PI * epoch as f64 / cfg.epochs as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + libm::cos(phase)))
}

/// One momentum-SGD update on a flat parameter slice:
/// `g = grad + wd·param; v = momentum·v + g; param -= lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Shape(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index: 0 });
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Optimizer state for a whole graph. Decay applies only to parameters whose
/// role decays (conv, linear and attention weights).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(graph: &ModelGraph, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: graph.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// All gradients are checked before any parameter moves.
    pub fn step(&mut self, graph: &mut ModelGraph, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(TrainError::Shape(format!("{} gradients for {} parameters", grads.len(), self.velocity.len())));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { index });
        }
        for ((p, g), v) in graph.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = if p.role.decays() { self.weight_decay } else { 0.0 };
            sgd_step(p.value.data_mut(), g.data(), v.data_mut(), lr, self.momentum, wd)?;
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy over the batch (max-shifted) and its gradient
/// `(softmax - onehot) / N`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2("cross_entropy").map_err(|e| TrainError::Shape(format!("{e}")))?;
    if labels.len() != n {
        return Err(TrainError::Shape(format!("{} labels for {} rows", labels.len(), n)));
    }
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(TrainError::LabelOutOfRange { label, classes: k });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| libm::exp(z - max)).collect();
        let total: f64 = exps.iter().sum();
        loss += libm::log(total) - (row[label] - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push((e / total - onehot) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, k], grad).expect("logit shape")))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Eval-mode accuracy over the whole set.
pub fn evaluate(graph: &ModelGraph, set: &Cifar10Set, norm: &NormStats, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let cfg = AugmentConfig::standard(*norm);
    let mut correct = 0;
    for batch in batches(set, batch_size, 0, 0, &cfg)? {
        let logits = graph.infer(&batch.images)?;
        correct += count_correct(&logits, &batch.labels);
    }
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Runs the full recipe. `on_epoch` sees each record as soon as it is
/// complete. On a non-finite loss the parameters of the last completed epoch
/// are restored and [`TrainError::Diverged`] is returned.
pub fn train<C: Clock>(
    graph: &mut ModelGraph,
    train_set: &Cifar10Set,
    test_set: &Cifar10Set,
    norm: &NormStats,
    cfg: &TrainConfig,
    clock: &mut C,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    let (train_set, test_set) = match cfg.subset_size {
        Some(n) => (train_set.subset(n), test_set.subset(n)),
        None => (train_set.clone(), test_set.clone()),
    };
    if train_set.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    let augment = AugmentConfig::standard(*norm);
    let mut opt = Sgd::new(graph, cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut last_good: ModelState = graph.state();

    for epoch in 0..cfg.epochs {
        let start = clock.now();
        let lr = cosine_lr(epoch, cfg)?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (bi, batch) in batches(&train_set, cfg.batch_size, cfg.seed, epoch, &augment)?.enumerate() {
            let logits = graph.forward(&batch.images, true)?;
            let (loss, grad) = cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                graph.load_state(last_good)?;
                return Err(TrainError::Diverged { epoch: epoch + 1, batch: bi });
            }
            loss_sum += loss * batch.labels.len() as f64;
            correct += count_correct(&logits, &batch.labels);
            let grads = graph.backward(&grad)?;
            graph.clear_cache();
            if let Err(e) = opt.step(graph, &grads, lr) {
                graph.load_state(last_good)?;
                return Err(e);
            }
        }
        let test_acc = evaluate(graph, &test_set, norm, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
            seconds: clock.now().saturating_sub(start).as_secs_f64(),
        };
        on_epoch(&record);
        log.records.push(record);
        last_good = graph.state();
    }
    Ok(log)
}
