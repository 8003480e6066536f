//! Comparison methods: distillation into a full student, contrastive
//! alignment of a full student, and uniform random guessing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingHistory;
use crate::autodiff::{Eval, Ops, Tape};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::pretrain::epoch_batches;
use crate::model::{batched, EncoderModel, TaskHead};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Prim, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Kd,
    KdContrast,
    Random,
}

impl BaselineKind {
    pub fn id(self) -> &'static str {
        match self {
            BaselineKind::Kd => "kd",
            BaselineKind::KdContrast => "kd-contrast",
            BaselineKind::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Softening temperature for distillation targets.
    pub kd_temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            temperature: 0.04,
            kd_temperature: 1.0,
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// A fully trainable copy of the new-modality encoder with its own head.
#[derive(Clone, Debug)]
pub struct KdStudent {
    pub encoder: EncoderModel,
    pub head: TaskHead,
    pub history: TrainingHistory,
}

impl KdStudent {
    pub fn trainable_params(&self) -> usize {
        self.encoder.param_count() + self.head.param_count()
    }

    pub fn predict(&self, x_new: &Tensor) -> Result<Tensor> {
        batched(x_new, 256, |b| self.head.probabilities(&self.encoder.eval(b)?))
    }
}

fn check_pairs(x_old: &Tensor, x_new: &Tensor, batch: usize) -> Result<()> {
    if x_old.outer() != x_new.outer() {
        return Err(Error::invalid(format!(
            "{} old vs {} new paired samples",
            x_old.outer(),
            x_new.outer()
        )));
    }
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(())
}

fn diverged(epoch: usize, step: usize, v: f64) -> Error {
    Error::Diverged {
        epoch: epoch + 1,
        step: step + 1,
        detail: format!("loss {v}"),
    }
}

/// Distills teacher soft predictions on the paired samples into a student
/// initialized from `new_model`, with every student parameter trainable.
pub fn train_kd(
    new_model: &EncoderModel,
    teacher: &EncoderModel,
    head_old: &TaskHead,
    x_old: &Tensor,
    x_new: &Tensor,
    cfg: &BaselineConfig,
) -> Result<KdStudent> {
    check_pairs(x_old, x_new, cfg.batch_size)?;
    if !(cfg.kd_temperature > 0.0) {
        return Err(Error::invalid("distillation temperature must be > 0"));
    }
    let t = cfg.kd_temperature;
    let soft = batched(x_old, 256, |b| {
        let mut e = Eval;
        let z = head_old.logits(&mut e, &teacher.eval(b)?)?;
        let z = e.affine(&z, 1.0 / t, 0.0)?;
        e.softmax(&z)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = new_model.detached();
    encoder.set_trainable(true);
    let (_, d) = encoder.shape_after(encoder.layer_count())?;
    let mut head = TaskHead::new(d, head_old.classes(), 1.0 / (d as f64).sqrt(), &mut rng);
    head.set_trainable(true);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = TrainingHistory::default();
    let n = x_new.outer();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for (step, idx) in epoch_batches(n, cfg.batch_size, &mut rng).iter().enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(x_new.gather_outer(idx));
            let h = encoder.forward(&mut tape, &x)?;
            let z = head.logits(&mut tape, &h)?;
            let z = tape.affine(&z, 1.0 / t, 0.0)?;
            let loss = cross_entropy(&mut tape, &z, soft.gather_outer(idx))?;
            let v = tape.value(&loss).item();
            if !v.is_finite() {
                return Err(diverged(epoch, step, v));
            }
            total += v * idx.len() as f64;
            tape.backward(loss)?.write_into(encoder.params_mut().chain(head.params_mut()));
            adam.step(encoder.params_mut().chain(head.params_mut()))?;
        }
        history.epoch_loss.push(total / n as f64);
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    encoder.freeze();
    head.set_trainable(false);
    Ok(KdStudent { encoder, head, history })
}

/// Symmetric in-batch InfoNCE between row-matched embeddings `a` and `b`
/// (`[batch, dim]` each); positives are matching rows.
pub fn info_nce<O: Ops>(o: &mut O, a: &O::Value, b: &O::Value, tau: f64) -> Result<O::Value> {
    if !(tau > 0.0) {
        return Err(Error::invalid("InfoNCE temperature must be > 0"));
    }
    let (sa, sb) = (o.value(a).shape().to_vec(), o.value(b).shape().to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("info_nce", format!("{sa:?} vs {sb:?}")));
    }
    let batch = sa[0];
    if batch < 2 {
        return Err(Error::invalid("InfoNCE needs a batch of at least 2 (no negatives)"));
    }
    let na = o.apply(Prim::L2NormalizeRows, &[a])?;
    let nb = o.apply(Prim::L2NormalizeRows, &[b])?;
    let nbt = o.transpose(&nb)?;
    let s = o.matmul(&na, &nbt)?;
    let s = o.affine(&s, 1.0 / tau, 0.0)?;
    let st = o.transpose(&s)?;
    let l1 = cross_entropy(o, &s, Tensor::identity(batch))?;
    let l2 = cross_entropy(o, &st, Tensor::identity(batch))?;
    let sum = o.add(&l1, &l2)?;
    o.affine(&sum, 0.5, 0.0)
}

/// A trainable new-modality encoder plus a linear map into the old encoder's
/// pooled embedding space; classification reuses the old head.
#[derive(Clone, Debug)]
pub struct ContrastStudent {
    pub encoder: EncoderModel,
    pub projection: TaskHead,
    pub history: TrainingHistory,
}

impl ContrastStudent {
    pub fn trainable_params(&self) -> usize {
        self.encoder.param_count() + self.projection.param_count()
    }

    pub fn predict(&self, head_old: &TaskHead, x_new: &Tensor) -> Result<Tensor> {
        batched(x_new, 256, |b| {
            let mut e = Eval;
            let h = self.encoder.eval(b)?;
            let pooled = e.mean_axis(&h, 1)?;
            let proj = self.projection.logits_pooled(&mut e, &pooled)?;
            let z = head_old.logits_pooled(&mut e, &proj)?;
            e.softmax(&z)
        })
    }
}

pub fn train_kd_contrast(
    new_model: &EncoderModel,
    teacher: &EncoderModel,
    x_old: &Tensor,
    x_new: &Tensor,
    cfg: &BaselineConfig,
) -> Result<ContrastStudent> {
    check_pairs(x_old, x_new, cfg.batch_size)?;
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid("InfoNCE temperature must be > 0"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::invalid("contrastive training needs batch size >= 2"));
    }
    let targets = batched(x_old, 256, |b| {
        let mut e = Eval;
        e.mean_axis(&teacher.eval(b)?, 1)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = new_model.detached();
    encoder.set_trainable(true);
    let (_, d_new) = encoder.shape_after(encoder.layer_count())?;
    let d_old = targets.shape()[1];
    let mut projection = TaskHead::new(d_new, d_old, 1.0 / (d_new as f64).sqrt(), &mut rng);
    projection.set_trainable(true);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = TrainingHistory::default();
    let n = x_new.outer();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let mut counted = 0;
        for (step, idx) in epoch_batches(n, cfg.batch_size, &mut rng).iter().enumerate() {
            // a trailing singleton batch has no negatives
            if idx.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let x = tape.constant(x_new.gather_outer(idx));
            let h = encoder.forward(&mut tape, &x)?;
            let pooled = tape.mean_axis(&h, 1)?;
            let proj = projection.logits_pooled(&mut tape, &pooled)?;
            let t = tape.constant(targets.gather_outer(idx));
            let loss = info_nce(&mut tape, &proj, &t, cfg.temperature)?;
            let v = tape.value(&loss).item();
            if !v.is_finite() {
                return Err(diverged(epoch, step, v));
            }
            total += v * idx.len() as f64;
            counted += idx.len();
            tape.backward(loss)?
                .write_into(encoder.params_mut().chain(projection.params_mut()));
            adam.step(encoder.params_mut().chain(projection.params_mut()))?;
        }
        history.epoch_loss.push(total / counted.max(1) as f64);
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    encoder.freeze();
    projection.set_trainable(false);
    Ok(ContrastStudent {
        encoder,
        projection,
        history,
    })
}

/// Uniform i.i.d. labels in `0..classes`, deterministic per seed.
pub fn random_baseline(classes: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::invalid("random baseline needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.random_range(0..classes)).collect())
}
