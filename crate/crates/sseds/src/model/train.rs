//! Shared training loop for pretraining and slim retraining.

use serde::{Deserialize, Serialize};

use crate::dataio::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::adam::{adam_step, AdamHyper, AdamState};
use crate::model::{batch_labels, loss, CtrModel};
use crate::real::Real;

/// Instrumented forward/backward accounting, the evidence behind the
/// single-pass pruning guarantee.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounter {
    pub forward_backward: u64,
    pub forward_only: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub hyper: AdamHyper,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 3,
            batch_size: 2048,
            shuffle_seed: 0,
            hyper: AdamHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-record train loss (gradients use the sum convention).
    pub train_loss: f64,
    pub valid_auc: f64,
}

/// Batched inference on an immutable model.
pub fn predict<F: Real>(
    model: &CtrModel<F>,
    dataset: &Dataset,
    batch_size: usize,
    counter: &mut PassCounter,
) -> Result<Vec<f64>> {
    let mut preds = Vec::with_capacity(dataset.len());
    for batch in batch_iter(dataset, batch_size, 0, false) {
        let (probs, _) = model.forward(&batch.records)?;
        counter.forward_only += 1;
        preds.extend(probs.iter().map(|p| p.into_f64()));
    }
    Ok(preds)
}

fn labels_of(dataset: &Dataset) -> Vec<u8> {
    dataset.records.iter().map(|r| r.label).collect()
}

/// Optimize all model parameters jointly with Adam. `epochs == 0` is a
/// no-op returning an empty metrics log (the "w/o retraining" path).
pub fn train_model<F: Real>(
    model: &mut CtrModel<F>,
    train: &Dataset,
    valid: &Dataset,
    opts: &TrainOptions,
    counter: &mut PassCounter,
) -> Result<Vec<EpochMetrics>> {
    let mut state = AdamState::new(model, opts.hyper);
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut epoch_loss = F::zero();
        for batch in batch_iter(train, opts.batch_size, opts.shuffle_seed.wrapping_add(epoch as u64), true)
        {
            let (probs, trace) = model.forward(&batch.records)?;
            let labels = batch_labels(&batch.records);
            let batch_loss = loss(&probs, &labels);
            if !batch_loss.is_finite() {
                return Err(Error::numerical("divergence: non-finite loss"));
            }
            epoch_loss += batch_loss;
            let grads = model.backward(&batch.records, &trace)?;
            counter.forward_backward += 1;
            adam_step(model, &grads, &mut state);
        }
        let preds = predict(model, valid, opts.batch_size, counter)?;
        let valid_auc = eval::auc(&preds, &labels_of(valid))?;
        log.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss.into_f64() / train.len().max(1) as f64,
            valid_auc,
        });
    }
    Ok(log)
}

/// Pretraining stage: same loop, but zero epochs is a usage error.
pub fn pretrain<F: Real>(
    model: &mut CtrModel<F>,
    train: &Dataset,
    valid: &Dataset,
    opts: &TrainOptions,
    counter: &mut PassCounter,
) -> Result<Vec<EpochMetrics>> {
    if opts.epochs == 0 {
        return Err(Error::config("pretraining requires epochs >= 1"));
    }
    train_model(model, train, valid, opts, counter)
}
