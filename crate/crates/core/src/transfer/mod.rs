//! Output-position selection, bridge training and bridged inference.

mod baselines;

pub use baselines::{
    info_nce, random_baseline, train_kd, train_kd_contrast, BaselineConfig, BaselineKind, ContrastStudent,
    KdStudent,
};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Ops, Tape};
use crate::bridge::{init_bridge, BridgeParams, BridgeShapeSpec, InitStrategy, PoolKind};
use crate::cka::{cka_linear, subsample_indices, RepresentationMatrix};
use crate::error::{Error, Result};
use crate::metrics::balanced_accuracy_detail;
use crate::model::pretrain::epoch_batches;
use crate::model::{argmax_rows, batched, EncoderModel, TaskHead};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Prim, Tensor};

/// Bridge input position `m` (new encoder) and output position `l` (old encoder), both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Positions {
    pub m: usize,
    pub l: usize,
}

impl Positions {
    pub fn validate(&self, new_model: &EncoderModel, teacher: &EncoderModel) -> Result<()> {
        if self.m == 0 || self.m > new_model.layer_count() {
            return Err(Error::invalid(format!(
                "input position m = {} outside 1..={}",
                self.m,
                new_model.layer_count()
            )));
        }
        if self.l == 0 || self.l > teacher.layer_count() {
            return Err(Error::invalid(format!(
                "output position l = {} outside 1..={}",
                self.l,
                teacher.layer_count()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionCriterion {
    /// Most similar old layer.
    #[default]
    Max,
    /// Least similar old layer, for comparison runs.
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputPositionChoice {
    pub position: usize,
    /// CKA per old layer `1..=L`; `None` where that layer was degenerate.
    pub scores: Vec<Option<f64>>,
}

/// Compares the chosen new-modality representation with every old-modality
/// layer on the same (optionally subsampled) paired rows.
pub fn select_output_position(
    h_new: &Tensor,
    teacher: &EncoderModel,
    x_old: &Tensor,
    row_cap: usize,
    seed: u64,
    criterion: SelectionCriterion,
) -> Result<OutputPositionChoice> {
    let n = h_new.outer();
    if x_old.outer() != n {
        return Err(Error::invalid(format!("{n} new-modality rows vs {} old-modality rows", x_old.outer())));
    }
    let idx = subsample_indices(n, row_cap, seed)?;
    let a = RepresentationMatrix::from_batch(&h_new.gather_outer(&idx), 0, "new")?;
    let reps = teacher.forward_all(&x_old.gather_outer(&idx))?;
    let mut scores = Vec::with_capacity(reps.len());
    for (i, h) in reps.iter().enumerate() {
        let b = RepresentationMatrix::from_batch(h, i + 1, teacher.modality())?;
        scores.push(match cka_linear(&a, &b) {
            Ok(v) => Some(v),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        let better = match (best, criterion) {
            (None, _) => true,
            (Some((_, b)), SelectionCriterion::Max) => s > b,
            (Some((_, b)), SelectionCriterion::Min) => s < b,
        };
        if better {
            best = Some((i, s));
        }
    }
    let (i, _) = best.ok_or_else(|| Error::Degenerate("every old-modality layer is degenerate".into()))?;
    Ok(OutputPositionChoice { position: i + 1, scores })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignLoss {
    #[default]
    Cosine,
    Mae,
}

/// Alignment loss between a bridged representation and the teacher's, plus
/// the number of zero-norm rows met under the cosine loss (each contributes 1).
pub fn alignment_loss<O: Ops>(
    o: &mut O,
    h_tilde: &O::Value,
    h: &O::Value,
    kind: AlignLoss,
    pooled_cosine: bool,
) -> Result<(O::Value, usize)> {
    let (ts, hs) = (o.value(h_tilde).shape().to_vec(), o.value(h).shape().to_vec());
    if ts != hs {
        return Err(Error::shape("alignment_loss", format!("{ts:?} vs {hs:?}")));
    }
    match kind {
        AlignLoss::Mae => {
            let d = o.sub(h_tilde, h)?;
            let a = o.apply(Prim::Abs, &[&d])?;
            Ok((o.mean_all(&a)?, 0))
        }
        AlignLoss::Cosine => {
            let (a, b) = if pooled_cosine && ts.len() == 3 {
                (o.mean_axis(h_tilde, 1)?, o.mean_axis(h, 1)?)
            } else {
                (h_tilde.clone(), h.clone())
            };
            let zero = zero_rows(o.value(&a)) + zero_rows(o.value(&b));
            let cos = o.apply(Prim::CosineRows, &[&a, &b])?;
            let m = o.mean_all(&cos)?;
            Ok((o.affine(&m, -1.0, 1.0)?, zero))
        }
    }
}

fn zero_rows(t: &Tensor) -> usize {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d).filter(|r| r.iter().all(|v| *v == 0.0)).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: AlignLoss,
    pub pooled_cosine: bool,
    /// Old-model layer where alignment happens; `None` means the final layer.
    pub align_layer: Option<usize>,
}

impl Default for BridgeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            loss: AlignLoss::Cosine,
            pooled_cosine: false,
            align_layer: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epoch_loss: Vec<f64>,
    /// Balanced accuracy on the validation split after each epoch, when one was given.
    pub val_metric: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub zero_norm_rows: usize,
}

/// Labeled data used only to compute a metric.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
}

/// The composed new-prefix → bridge → old-suffix → head classifier.
#[derive(Clone, Copy, Debug)]
pub struct Bridged<'a> {
    pub new_model: &'a EncoderModel,
    pub teacher: &'a EncoderModel,
    pub head: &'a TaskHead,
    pub bridge: &'a BridgeParams,
    pub positions: Positions,
}

impl Bridged<'_> {
    pub fn logits<O: Ops>(&self, o: &mut O, x_new: &O::Value) -> Result<O::Value> {
        let h = self.new_model.forward_prefix(o, x_new, self.positions.m)?;
        let b = self.bridge.forward(o, &h)?;
        self.logits_from_bridge_output(o, &b)
    }

    /// Old-model suffix and head applied to a bridge output (or anything shaped like one).
    pub fn logits_from_bridge_output<O: Ops>(&self, o: &mut O, b: &O::Value) -> Result<O::Value> {
        let out = self.teacher.forward_suffix(o, b, self.positions.l)?;
        self.head.logits(o, &out)
    }

    pub fn predict(&self, x_new: &Tensor) -> Result<Tensor> {
        batched(x_new, 256, |xb| {
            let mut e = Eval;
            let z = self.logits(&mut e, xb)?;
            e.softmax(&z)
        })
    }
}

pub fn bridged_predict(
    teacher: &EncoderModel,
    new_model: &EncoderModel,
    head: &TaskHead,
    bridge: &BridgeParams,
    positions: Positions,
    x_new: &Tensor,
) -> Result<Tensor> {
    Bridged {
        new_model,
        teacher,
        head,
        bridge,
        positions,
    }
    .predict(x_new)
}

/// Bridge shape for a pair of encoders at `positions`.
pub fn bridge_spec_for(
    new_model: &EncoderModel,
    teacher: &EncoderModel,
    positions: Positions,
    rank: usize,
    prototypes: usize,
) -> Result<BridgeShapeSpec> {
    positions.validate(new_model, teacher)?;
    let (_, d_m) = new_model.shape_after(positions.m)?;
    let (n_l, d_l) = teacher.shape_after(positions.l)?;
    let spec = BridgeShapeSpec {
        input_dim: d_m,
        output_tokens: n_l,
        output_dim: d_l,
        rank,
        prototypes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Fresh bridge whose prototypes, when drawn from old representations, come
/// from the teacher's layer-`l` output on the first `batch_size` paired samples.
#[allow(clippy::too_many_arguments)]
pub fn init_bridge_for(
    new_model: &EncoderModel,
    teacher: &EncoderModel,
    x_old: &Tensor,
    positions: Positions,
    rank: usize,
    prototypes: usize,
    strategy: InitStrategy,
    pool: PoolKind,
    batch_size: usize,
    seed: u64,
) -> Result<BridgeParams> {
    let spec = bridge_spec_for(new_model, teacher, positions, rank, prototypes)?;
    let reps = match strategy {
        InitStrategy::Random => None,
        InitStrategy::PrototypeFromOld => {
            let k = batch_size.clamp(1, x_old.outer());
            let idx: Vec<usize> = (0..k).collect();
            Some(teacher.eval_prefix(&x_old.gather_outer(&idx), positions.l)?)
        }
    };
    init_bridge(spec, strategy, pool, reps.as_ref(), seed)
}

pub fn evaluate_bacc(probs: &Tensor, labels: &[usize], classes: usize) -> Result<f64> {
    Ok(balanced_accuracy_detail(labels, &argmax_rows(probs), classes)?.value)
}

/// Trains only the bridge so that the bridged representation at the alignment
/// layer matches the teacher's on the paired samples. Both encoders must be frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_bridge(
    teacher: &EncoderModel,
    new_model: &EncoderModel,
    head: &TaskHead,
    x_old: &Tensor,
    x_new: &Tensor,
    positions: Positions,
    mut bridge: BridgeParams,
    cfg: &BridgeTrainConfig,
    val: Option<EvalSet<'_>>,
) -> Result<(BridgeParams, TrainingHistory)> {
    positions.validate(new_model, teacher)?;
    if !teacher.is_frozen() || !new_model.is_frozen() {
        return Err(Error::invalid("bridge training requires both encoders to be frozen"));
    }
    if x_old.outer() != x_new.outer() {
        return Err(Error::invalid(format!(
            "{} old vs {} new paired samples",
            x_old.outer(),
            x_new.outer()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let depth = teacher.layer_count();
    let align = cfg.align_layer.unwrap_or(depth);
    if align < positions.l || align > depth {
        return Err(Error::invalid(format!(
            "alignment layer {align} must lie in {}..={depth}",
            positions.l
        )));
    }
    let h_in = batched(x_new, 256, |b| new_model.eval_prefix(b, positions.m))?;
    let target = batched(x_old, 256, |b| teacher.eval_prefix(b, align))?;

    bridge.params_mut().for_each(|p| p.set_trainable(true));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hist = TrainingHistory::default();
    let n = x_new.outer();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for (step, idx) in epoch_batches(n, cfg.batch_size, &mut rng).iter().enumerate() {
            let mut tape = Tape::new();
            let h = tape.constant(h_in.gather_outer(idx));
            let t = tape.constant(target.gather_outer(idx));
            let b = bridge.forward(&mut tape, &h)?;
            let out = teacher.forward_range(&mut tape, &b, positions.l, align)?;
            let (loss, zero) = alignment_loss(&mut tape, &out, &t, cfg.loss, cfg.pooled_cosine)?;
            hist.zero_norm_rows += zero;
            let v = tape.value(&loss).item();
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step: step + 1,
                    detail: format!("alignment loss {v}"),
                });
            }
            total += v * idx.len() as f64;
            tape.backward(loss)?.write_into(bridge.params_mut());
            adam.step(bridge.params_mut())?;
        }
        hist.epoch_loss.push(total / n as f64);
        if let Some(v) = val {
            let probs = bridged_predict(teacher, new_model, head, &bridge, positions, v.x)?;
            hist.val_metric.push(evaluate_bacc(&probs, v.labels, head.classes())?);
        }
        hist.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    bridge.params_mut().for_each(|p| p.set_trainable(false));
    Ok((bridge, hist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict, Architecture, LayerSpec};

    fn models() -> (EncoderModel, EncoderModel, TaskHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut teacher = EncoderModel::build(Architecture::Conv, "ecg", (64, 4), &mut rng).unwrap();
        let mut new = EncoderModel::build(Architecture::Conv, "ppg", (32, 3), &mut rng).unwrap();
        teacher.freeze();
        new.freeze();
        let head = TaskHead::new(32, 3, 0.5, &mut rng);
        (teacher, new, head)
    }

    #[test]
    fn cosine_and_mae_examples() {
        let mut e = Eval;
        let h = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let neg = h.map(|v| -v);
        let orth = Tensor::new(vec![1, 2, 2], vec![0.0, 3.0, 1.0, 0.0]).unwrap();
        let loss = |e: &mut Eval, a: &Tensor, k| alignment_loss(e, a, &h, k, false).unwrap().0.item();
        assert_eq!(loss(&mut e, &h, AlignLoss::Cosine), 0.0);
        assert_eq!(loss(&mut e, &h, AlignLoss::Mae), 0.0);
        assert!((loss(&mut e, &neg, AlignLoss::Cosine) - 2.0).abs() < 1e-15);
        assert!((loss(&mut e, &orth, AlignLoss::Cosine) - 1.0).abs() < 1e-15);
        let zero = Tensor::zeros(&[1, 2, 2]);
        let (v, count) = alignment_loss(&mut e, &zero, &h, AlignLoss::Cosine, false).unwrap();
        assert_eq!((v.item(), count), (1.0, 2));
        assert!(alignment_loss(&mut e, &Tensor::zeros(&[1, 2, 3]), &h, AlignLoss::Mae, false).is_err());
    }

    #[test]
    fn single_layer_teacher_gives_l_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = EncoderModel::new(
            "x",
            (8, 2),
            vec![LayerSpec::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
            &mut rng,
        )
        .unwrap();
        let x = Tensor::randn(&[6, 8, 2], 1.0, &mut rng);
        let h = Tensor::randn(&[6, 4, 5], 1.0, &mut rng);
        let c = select_output_position(&h, &t, &x, 512, 0, SelectionCriterion::Max).unwrap();
        assert_eq!(c.position, 1);
    }

    #[test]
    fn copied_layer_is_selected() {
        let (teacher, _, _) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[20, 64, 4], 1.0, &mut rng);
        let h2 = teacher.eval_prefix(&x, 2).unwrap();
        let c = select_output_position(&h2, &teacher, &x, 512, 0, SelectionCriterion::Max).unwrap();
        assert_eq!(c.position, 2);
        assert!((c.scores[1].unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_leaves_bridge_and_encoders_unchanged() {
        let (teacher, new, head) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xo = Tensor::randn(&[40, 64, 4], 1.0, &mut rng);
        let xn = Tensor::randn(&[40, 32, 3], 1.0, &mut rng);
        let pos = Positions { m: 2, l: 3 };
        let bridge = init_bridge_for(&new, &teacher, &xo, pos, 2, 4, InitStrategy::PrototypeFromOld, PoolKind::Mean, 16, 0)
            .unwrap();
        let before = (teacher.snapshot(), new.snapshot());
        let cfg = BridgeTrainConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 16,
            ..Default::default()
        };
        let (out, hist) = train_bridge(&teacher, &new, &head, &xo, &xn, pos, bridge.clone(), &cfg, None).unwrap();
        for (a, b) in out.params().zip(bridge.params()) {
            assert_eq!(a.value(), b.value());
        }
        assert_eq!(hist.epoch_loss.len(), 3);
        assert!(hist.epoch_loss.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
        assert_eq!((teacher.snapshot(), new.snapshot()), before);
    }

    #[test]
    fn training_reduces_loss_and_keeps_encoders() {
        let (teacher, new, head) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xo = Tensor::randn(&[64, 64, 4], 1.0, &mut rng);
        let xn = Tensor::randn(&[64, 32, 3], 1.0, &mut rng);
        let pos = Positions { m: 4, l: 2 };
        let bridge = init_bridge_for(&new, &teacher, &xo, pos, 4, 8, InitStrategy::PrototypeFromOld, PoolKind::Mean, 32, 0)
            .unwrap();
        let before = teacher.snapshot();
        let cfg = BridgeTrainConfig {
            epochs: 10,
            lr: 1e-2,
            ..Default::default()
        };
        let labels: Vec<usize> = (0..64).map(|i| i % 3).collect();
        let (b, hist) = train_bridge(
            &teacher,
            &new,
            &head,
            &xo,
            &xn,
            pos,
            bridge,
            &cfg,
            Some(EvalSet { x: &xn, labels: &labels }),
        )
        .unwrap();
        assert!(hist.epoch_loss[0] > *hist.epoch_loss.last().unwrap());
        assert_eq!(hist.val_metric.len(), 10);
        assert_eq!(teacher.snapshot(), before);
        let p = bridged_predict(&teacher, &new, &head, &b, pos, &xn).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let _ = predict(&teacher, &head, &xo).unwrap();
    }

    #[test]
    fn unfrozen_encoder_rejected() {
        let (teacher, mut new, head) = models();
        new.set_trainable(true);
        let x = Tensor::zeros(&[2, 64, 4]);
        let spec = bridge_spec_for(&new, &teacher, Positions { m: 1, l: 1 }, 1, 1).unwrap();
        let b = init_bridge(spec, InitStrategy::Random, PoolKind::Mean, None, 0).unwrap();
        let r = train_bridge(
            &teacher,
            &new,
            &head,
            &x,
            &Tensor::zeros(&[2, 32, 3]),
            Positions { m: 1, l: 1 },
            b,
            &BridgeTrainConfig::default(),
            None,
        );
        assert!(r.is_err());
    }
}
