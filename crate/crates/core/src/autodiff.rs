//! Reverse-mode differentiation over [`Prim`] applications.
//!
//! Model code is written once against the [`Ops`] trait. [`Eval`] runs it
//! without any bookkeeping; [`Tape`] records every application so that
//! [`Tape::backward`] can produce gradients. Recording is therefore explicit:
//! it starts when a tape is created and is never ambient.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Prim, Tensor};

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named weight tensor with its gradient slot.
///
/// Cloning keeps the id; use [`Parameter::detached`] when a copy must be
/// distinguishable from its source inside one tape.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: ParamId::fresh(),
            value,
            grad,
            trainable,
        }
    }

    pub fn detached(&self) -> Self {
        Self::new(self.value.clone(), self.trainable)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "parameter",
                format!("{:?} -> {:?}", self.value.shape(), value.shape()),
            ));
        }
        self.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(
                "gradient",
                format!("{:?} for parameter {:?}", grad.shape(), self.value.shape()),
            ));
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

/// Evaluation context for model code.
pub trait Ops {
    type Value: Clone;

    fn apply(&mut self, prim: Prim, inputs: &[&Self::Value]) -> Result<Self::Value>;
    /// Brings a parameter into the computation. Frozen parameters enter as constants.
    fn param(&mut self, p: &Parameter) -> Self::Value;
    fn constant(&mut self, t: Tensor) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::MatMul, &[a, b])
    }
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Mul, &[a, b])
    }
    fn add_bias(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::AddBroadcast, &[a, b])
    }
    fn mul_bcast(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::MulBroadcast, &[a, b])
    }
    fn affine(&mut self, a: &Self::Value, scale: f64, shift: f64) -> Result<Self::Value> {
        self.apply(Prim::Affine { scale, shift }, &[a])
    }
    fn gelu(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Gelu, &[a])
    }
    fn mean_axis(&mut self, a: &Self::Value, axis: usize) -> Result<Self::Value> {
        self.apply(Prim::MeanAxis { axis }, &[a])
    }
    fn mean_all(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::MeanAll, &[a])
    }
    fn sum_all(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::SumAll, &[a])
    }
    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Prim::Reshape { shape: shape.to_vec() }, &[a])
    }
    fn log_softmax(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::LogSoftmax, &[a])
    }
    fn softmax(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Softmax, &[a])
    }
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::TransposeLast2, &[a])
    }
}

/// Plain evaluation, nothing recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Ops for Eval {
    type Value = Tensor;

    fn apply(&mut self, prim: Prim, inputs: &[&Tensor]) -> Result<Tensor> {
        prim.forward(inputs)
    }

    fn param(&mut self, p: &Parameter) -> Tensor {
        p.value.clone()
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
struct Node {
    value: Tensor,
    prim: Option<Prim>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// The computation record: primitive applications in execution order, so
/// every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives a gradient, without being a parameter.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, None, Vec::new(), true, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor,
        prim: Option<Prim>,
        inputs: Vec<NodeId>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            prim,
            inputs,
            requires_grad,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) back through the record.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(out.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(prim) = &node.prim else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| self.nodes[i.0].requires_grad)
                .collect();
            let input_grads = prim.vjp(&inputs, &node.value, &g, &needs)?;
            for ((input, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(ig)) = (*need, ig) else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[idx] = Some(g);
        }
        let mut by_param: HashMap<ParamId, Tensor> = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let (Some(pid), Some(g)) = (node.param, &grads[idx]) else { continue };
            match by_param.get_mut(&pid) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    by_param.insert(pid, g.clone());
                }
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }
}

impl Ops for Tape {
    type Value = NodeId;

    fn apply(&mut self, prim: Prim, inputs: &[&NodeId]) -> Result<NodeId> {
        let value = {
            let ts: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            prim.forward(&ts)?
        };
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(
            value,
            Some(prim),
            inputs.iter().map(|i| **i).collect(),
            requires_grad,
            None,
        ))
    }

    fn param(&mut self, p: &Parameter) -> NodeId {
        if p.trainable {
            self.push(p.value.clone(), None, Vec::new(), true, Some(p.id))
        } else {
            self.constant(p.value.clone())
        }
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, None, Vec::new(), false, None)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        &self.nodes[v.0].value
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Writes gradients into the parameters' slots. Parameters the loss does not
    /// reach get a zero gradient.
    pub fn write_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            match self.by_param.get(&p.id) {
                Some(g) => p.grad = g.clone(),
                None => p.zero_grad(),
            }
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from the given leaves. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all entries.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params.iter().map(|p| tape.input(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let base = tape.value(&loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective at base point".into()));
    }
    let grads = tape.backward(loss)?;

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = point.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &ids)?;
        let v = t.value(&out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective at probe point".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut point = params.to_vec();
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .node(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            point[pi].data_mut()[j] = orig + eps;
            let up = eval(&point)?;
            point[pi].data_mut()[j] = orig - eps;
            let down = eval(&point)?;
            point[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input() {
        let x = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let w = Parameter::new(Tensor::zeros(&[2, 3]), true);
        let mut tape = Tape::new();
        let wn = tape.param(&w);
        let xn = tape.constant(x.clone());
        let y = tape.matmul(&wn, &xn).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(loss).unwrap();
        let gw = g.param(w.id()).unwrap();
        assert_eq!(gw.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let w = Parameter::new(Tensor::full(&[2], 3.0), true);
        let mut tape = Tape::new();
        let _ = tape.param(&w);
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.sum_all(&c).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut params = vec![w];
        g.write_into(params.iter_mut());
        assert_eq!(params[0].grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_param_enters_as_constant() {
        let w = Parameter::new(Tensor::full(&[2], 1.0), false);
        let mut tape = Tape::new();
        let wn = tape.param(&w);
        let x = tape.input(Tensor::full(&[2], 2.0));
        let y = tape.mul(&wn, &x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param(w.id()).is_none());
        assert_eq!(g.node(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let w = Parameter::new(Tensor::full(&[1], 2.0), true);
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        let y = tape.mul(&a, &b).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w.id()).unwrap().data(), &[4.0]);
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(
            |t, p| t.mul(&p[0], &p[0]).and_then(|y| t.sum_all(&y)),
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_constant_is_exact() {
        let err = grad_check(
            |t, _| {
                let c = t.constant(Tensor::scalar(7.0));
                t.sum_all(&c)
            },
            &[Tensor::full(&[3], 1.0)],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_nonfinite() {
        let r = grad_check(
            |t, p| {
                let y = t.apply(Prim::Affine { scale: f64::INFINITY, shift: 0.0 }, &[&p[0]])?;
                t.sum_all(&y)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(r.is_err());
    }
}
