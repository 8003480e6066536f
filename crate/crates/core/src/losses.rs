//! Scalar training objectives shared by pretraining and the baselines.

use crate::autodiff::Ops;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    }))
}

/// Mean cross-entropy of `logits [batch, classes]` against target
/// distributions `targets [batch, classes]` (one-hot rows give the hard-label case).
pub fn cross_entropy<O: Ops>(o: &mut O, logits: &O::Value, targets: Tensor) -> Result<O::Value> {
    if o.value(logits).shape() != targets.shape() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?}, targets {:?}", o.value(logits).shape(), targets.shape()),
        ));
    }
    let batch = targets.outer() as f64;
    let logp = o.log_softmax(logits)?;
    let t = o.constant(targets);
    let prod = o.mul(&logp, &t)?;
    let s = o.sum_all(&prod)?;
    o.affine(&s, -1.0 / batch, 0.0)
}

pub fn mse<O: Ops>(o: &mut O, pred: &O::Value, target: Tensor) -> Result<O::Value> {
    let t = o.constant(target);
    let d = o.sub(pred, &t)?;
    let sq = o.mul(&d, &d)?;
    o.mean_all(&sq)
}
