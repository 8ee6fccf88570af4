//! Mini-batch training with Adam and early stopping, and evaluation.
//!
//! Every epoch visits the training set in an order drawn from
//! `stream(mix(seed, SHUFFLE), epoch)`, so a run is reproducible bit for bit
//! from its config. Parameters are restored to the epoch with the lowest
//! validation loss before [`train`] returns. SNR labels are never read.

mod adam;
mod early_stop;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{preprocess_batch, ModelBundle, ModelError, ModelKind};
use crate::rng;
use crate::sigsynth::Dataset;
use crate::tensorcore::{Graph, NormMode, Real, Tensor, TensorError, CE_CLAMP};

pub use adam::{adam_step, Adam, AdamConfig};
pub use early_stop::{EarlyStopping, Verdict};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("example {index} has class {class}, model has {n_classes} classes")]
    Label { index: usize, class: usize, n_classes: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating-point type of the training graph. Parameters and optimizer
/// state stay in `f64` either way.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 100,
            patience: 30,
            lr: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            model_kind: ModelKind::Moe,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Batch size and epoch budget of the original large-GPU protocol.
    pub fn paper_scale() -> Self {
        Self { batch_size: 1024, max_epochs: 500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        let (b1, b2) = self.adam_betas;
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.adam_eps <= 0.0 {
            return fail(format!("invalid optimizer settings lr={} betas={:?} eps={}", self.lr, self.adam_betas, self.adam_eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, betas: self.adam_betas, eps: self.adam_eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
        for r in &self.records {
            writeln!(s, "{},{:.6},{:.6},{:.6}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub predictions: Vec<usize>,
    /// Gate output per example (mixture only).
    pub gate: Option<Vec<f64>>,
}

fn check_labels(ds: &Dataset, n_classes: usize, what: &'static str) -> Result<(), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset(what));
    }
    match ds.examples.iter().position(|e| e.class_idx >= n_classes) {
        Some(index) => Err(TrainError::Label { index, class: ds.examples[index].class_idx, n_classes }),
        None => Ok(()),
    }
}

/// Preprocessed `[N, 2, L]` inputs with their labels.
struct Prepared<T: Real> {
    x: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Real> Prepared<T> {
    fn new(ds: &Dataset, input_len: usize) -> Result<Self, TrainError> {
        let x = preprocess_batch(ds.examples.iter().map(|e| &e.frame), input_len)?;
        Ok(Self { x, labels: ds.examples.iter().map(|e| e.class_idx).collect() })
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>), TrainError> {
        let row = self.x.numel() / self.labels.len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &k in idx {
            data.extend_from_slice(&self.x.data()[k * row..(k + 1) * row]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(shape, data)?, idx.iter().map(|&k| self.labels[k]).collect()))
    }
}

fn evaluate_prepared<T: Real>(bundle: &ModelBundle, data: &Prepared<T>, batch: usize) -> Result<Evaluation, TrainError> {
    let n = data.labels.len();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(n);
    let mut gate = bundle.gate.as_ref().map(|_| Vec::with_capacity(n));
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(batch.max(1)) {
        let (x, labels) = data.gather(idx)?;
        let mut g = Graph::<T>::new();
        let xv = g.input(x)?;
        let out = bundle.forward(&mut g, xv, NormMode::Eval)?;
        let l = g.cross_entropy(out.probs, &labels, CE_CLAMP)?;
        loss += g.value(l).item().as_f64() * idx.len() as f64;
        predictions.extend(crate::models::classify(g.value(out.probs)));
        if let (Some(gs), Some(v)) = (gate.as_mut(), out.gate) {
            gs.extend(g.value(v).data().iter().map(|v| v.as_f64()));
        }
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation { accuracy: correct as f64 / n as f64, loss: loss / n as f64, predictions, gate })
}

/// Eval-mode accuracy, loss and per-example predictions over `ds`.
pub fn evaluate<T: Real>(bundle: &ModelBundle, ds: &Dataset, batch: usize) -> Result<Evaluation, TrainError> {
    check_labels(ds, bundle.n_classes(), "evaluation")?;
    evaluate_prepared(bundle, &Prepared::<T>::new(ds, bundle.input_len())?, batch)
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / predictions.len() as f64
}

/// Trains `bundle` in place and leaves it holding the parameters of the
/// best validation epoch.
pub fn train(bundle: &mut ModelBundle, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory, TrainError> {
    train_with(bundle, train, val, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    bundle: &mut ModelBundle,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    match cfg.precision {
        Precision::F32 => run::<f32>(bundle, train, val, cfg, on_epoch),
        Precision::F64 => run::<f64>(bundle, train, val, cfg, on_epoch),
    }
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<T: Real>(bundle: &mut ModelBundle, opt: &mut Adam, x: Tensor<T>, labels: &[usize]) -> Result<f64, TrainError> {
    let mut g = Graph::<T>::new();
    let xv = g.input(x)?;
    let out = bundle.forward(&mut g, xv, NormMode::Train)?;
    let loss = g.cross_entropy(out.probs, labels, CE_CLAMP)?;
    bundle.store.zero_grad();
    g.backward(loss, &mut bundle.store)?;
    g.commit_running_stats(&mut bundle.store);
    opt.step(&mut bundle.store)?;
    Ok(g.value(loss).item().as_f64())
}

fn run<T: Real>(
    bundle: &mut ModelBundle,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    check_labels(train, bundle.n_classes(), "training")?;
    check_labels(val, bundle.n_classes(), "validation")?;
    let tr = Prepared::<T>::new(train, bundle.input_len())?;
    let va = Prepared::<T>::new(val, bundle.input_len())?;

    let mut opt = Adam::new(&bundle.store, cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = bundle.store.snapshot();
    let mut history = TrainHistory::default();
    let shuffle_seed = rng::mix(cfg.seed, rng::role::SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(shuffle_seed, epoch as u64));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = tr.gather(idx)?;
            total += train_step(bundle, &mut opt, x, &labels)? * idx.len() as f64;
        }
        let ev = evaluate_prepared(bundle, &va, cfg.batch_size.max(256))?;
        let record = EpochRecord { epoch, train_loss: total / train.len() as f64, val_loss: ev.loss, val_accuracy: ev.accuracy };
        history.records.push(record);
        on_epoch(&record);
        match stopper.observe(epoch, ev.loss) {
            Verdict::Improved => best = bundle.store.snapshot(),
            Verdict::Continue => {}
            Verdict::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    bundle.store.restore(&best);
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}

#[cfg(test)]
mod tests;
