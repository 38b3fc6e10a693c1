//! Class-weighted cross-entropy training with SGD and early stopping.

mod data;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NUM_CLASSES;
use crate::model::ModelHandle;
use crate::splits::FoldPlan;

pub use data::{write_access_log, AccessPurpose, AccessRecord, GuardedSource, InMemoryPatches, PatchSource};
pub use loss::{
    class_weights, class_weights_lenient, cross_entropy, loss_gradient, softmax, weighted_cross_entropy, Logits,
    Posteriors, Target, PROB_FLOOR,
};
pub use optim::SgdMomentum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Smallest validation-loss drop that resets the patience counter.
    pub min_delta: f64,
    pub seed: u64,
    /// Per-class loss weights; derived from training counts when absent.
    pub class_weights: Option<[f64; NUM_CLASSES]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-4,
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errors.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errors.push(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            errors.push("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            errors.push("max_epochs must be positive".into());
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                errors.push(format!("class_weights {w:?} must all be positive"));
            }
        }
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Outcome of a training run. The model handle is left holding the
/// best-validation weights, also kept here as `tensors`.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub class_weights: [f64; NUM_CLASSES],
    pub train_patches: usize,
    pub val_patches: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

struct Split {
    inputs: Tensor,
    labels: Vec<u32>,
}

fn gather(
    data: &dyn PatchSource,
    ids: impl IntoIterator<Item = impl AsRef<str>>,
    purpose: AccessPurpose,
) -> Result<Option<Split>> {
    let mut tensors = Vec::new();
    let mut labels = Vec::new();
    for id in ids {
        let (metas, t) = data.load(id.as_ref(), purpose)?;
        labels.extend(metas.iter().map(|m| m.label.index() as u32));
        tensors.push(t);
    }
    if labels.is_empty() {
        return Ok(None);
    }
    Ok(Some(Split { inputs: Tensor::cat(&tensors, 0)?, labels }))
}

fn select(split: &Split, idx: &[u32]) -> Result<(Tensor, Vec<u32>)> {
    let index = Tensor::from_slice(idx, idx.len(), split.inputs.device())?;
    let x = split.inputs.index_select(&index, 0)?;
    Ok((x, idx.iter().map(|&i| split.labels[i as usize]).collect()))
}

fn evaluate(model: &ModelHandle, split: &Split, batch_size: usize, weights: &[f32]) -> Result<(f64, f64)> {
    let n = split.labels.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for start in (0..n).step_by(batch_size) {
        let idx: Vec<u32> = (start..(start + batch_size).min(n)).map(|i| i as u32).collect();
        let (x, y) = select(split, &idx)?;
        let logits = model.forward(&x, false)?;
        let loss: f32 = weighted_cross_entropy(&logits, &y, weights)?.to_scalar()?;
        loss_sum += loss as f64 * idx.len() as f64;
        let pred: Vec<u32> = logits.argmax(1)?.to_vec1()?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Optimise `model` on the fold's training subjects, early-stopping on the
/// validation subjects. Patches are requested through `data` with
/// [`AccessPurpose::Train`] or [`AccessPurpose::Validate`] only.
///
/// The returned checkpoint is the epoch with the lowest validation loss.
/// Patience resets only when the loss beats the last reset point by at
/// least `min_delta`.
pub fn train_model(
    model: &ModelHandle,
    fold: &FoldPlan,
    data: &dyn PatchSource,
    cfg: &TrainConfig,
) -> Result<CheckpointRecord> {
    let train = gather(data, &fold.train_ids, AccessPurpose::Train)?.ok_or(Error::NoTrainingData)?;
    let val = gather(data, &fold.val_ids, AccessPurpose::Validate)?.ok_or(Error::NoValidationData)?;

    let class_weights: [f64; NUM_CLASSES] = match cfg.class_weights {
        Some(w) => w,
        None => {
            let mut counts = [0usize; NUM_CLASSES];
            for &y in &train.labels {
                counts[y as usize] += 1;
            }
            class_weights_lenient(&counts).try_into().expect("NUM_CLASSES weights")
        }
    };
    let weights_f32: Vec<f32> = class_weights.iter().map(|&w| w as f32).collect();

    let mut opt = SgdMomentum::new(model.trainable_vars(), cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train.labels.len();
    let mut order: Vec<u32> = (0..n as u32).collect();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor>)> = None;
    let mut reference = f64::INFINITY;
    let mut wait = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // A single-sample batch has no batch statistics to normalise by.
            if chunk.len() < 2 && n > 1 {
                continue;
            }
            let (x, y) = select(&train, chunk)?;
            let logits = model.forward(&x, true)?;
            let loss = weighted_cross_entropy(&logits, &y, &weights_f32)?;
            let value: f32 = loss.to_scalar()?;
            if !value.is_finite() {
                return Err(Error::DivergedLoss { epoch, batch });
            }
            opt.step(&loss.backward()?)?;
            loss_sum += value as f64 * chunk.len() as f64;
            seen += chunk.len();
        }

        let (val_loss, val_accuracy) = evaluate(model, &val, cfg.batch_size, &weights_f32)?;
        if !val_loss.is_finite() {
            return Err(Error::DivergedLoss { epoch, batch: 0 });
        }
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
        log::debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.3}");
        history.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });

        if best.as_ref().is_none_or(|(_, l, _)| val_loss < *l) {
            best = Some((epoch, val_loss, model.snapshot()?));
        }
        if val_loss < reference - cfg.min_delta {
            reference = val_loss;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, tensors) = best.expect("at least one epoch ran");
    model.restore(&tensors)?;
    Ok(CheckpointRecord {
        best_epoch,
        best_val_loss,
        history,
        class_weights,
        train_patches: n,
        val_patches: val.labels.len(),
        tensors,
    })
}
