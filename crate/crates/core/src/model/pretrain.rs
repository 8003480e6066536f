use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ops, Tape};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, mse, one_hot};
use crate::model::{EncoderModel, TaskHead};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    pub epoch_loss: Vec<f64>,
}

/// Shuffled mini-batch index lists for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn train_end_to_end<F>(
    model: &mut EncoderModel,
    head: &mut TaskHead,
    x: &Tensor,
    cfg: &TrainConfig,
    mut loss_fn: F,
) -> Result<PretrainHistory>
where
    F: FnMut(&mut Tape, &<Tape as Ops>::Value, &[usize]) -> Result<<Tape as Ops>::Value>,
{
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    model.set_trainable(true);
    head.set_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = PretrainHistory::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(x.outer(), cfg.batch_size, &mut rng);
        for (step, idx) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let xb = tape.constant(x.gather_outer(idx));
            let h = model.forward(&mut tape, &xb)?;
            let z = head.logits(&mut tape, &h)?;
            let loss = loss_fn(&mut tape, &z, idx)?;
            let value = tape.value(&loss).item();
            if !value.is_finite() {
                model.freeze();
                head.set_trainable(false);
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step: step + 1,
                    detail: format!("loss {value}"),
                });
            }
            total += value * idx.len() as f64;
            let grads = tape.backward(loss)?;
            grads.write_into(model.params_mut().chain(head.params_mut()));
            adam.step(model.params_mut().chain(head.params_mut()))?;
        }
        history.epoch_loss.push(total / x.outer() as f64);
    }
    model.freeze();
    head.set_trainable(false);
    Ok(history)
}

/// Trains encoder and head end-to-end with cross-entropy on labeled data, then
/// freezes both.
pub fn pretrain_supervised(
    model: &mut EncoderModel,
    head: &mut TaskHead,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<PretrainHistory> {
    if labels.len() != x.outer() {
        return Err(Error::invalid(format!(
            "{} labels for {} samples",
            labels.len(),
            x.outer()
        )));
    }
    let classes = head.classes();
    train_end_to_end(model, head, x, cfg, |tape, z, idx| {
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        cross_entropy(tape, z, one_hot(&y, classes)?)
    })
}

/// Trains encoder and a linear readout to regress continuous targets `[n, k]`
/// with squared error, then freezes both. The readout's "classes" are the `k`
/// target components.
pub fn pretrain_regression(
    model: &mut EncoderModel,
    readout: &mut TaskHead,
    x: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
) -> Result<PretrainHistory> {
    if targets.rank() != 2 || targets.outer() != x.outer() || targets.shape()[1] != readout.classes() {
        return Err(Error::shape(
            "pretrain_regression",
            format!("targets {:?} for {} samples", targets.shape(), x.outer()),
        ));
    }
    train_end_to_end(model, readout, x, cfg, |tape, z, idx| {
        mse(tape, z, targets.gather_outer(idx))
    })
}
