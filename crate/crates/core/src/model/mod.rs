//! Layer-stack encoders with prefix/suffix execution, plus the linear task head.
//!
//! Every representation is a `[batch, tokens, dim]` tensor; raw signals enter
//! the same way, with time steps as tokens and channels as the dimension.

mod checkpoint;
pub(crate) mod pretrain;

pub use checkpoint::{BridgeRecord, ModelCheckpoint};
pub use pretrain::{pretrain_regression, pretrain_supervised, PretrainHistory, TrainConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Ops, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_len, Prim, Tensor};

const LN_EPS: f64 = 1e-5;

/// Static description of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Convolution + bias + GELU.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Pre-norm single-head self-attention and feed-forward, both residual.
    Attention { dim: usize, hidden: usize },
    /// Layer normalization with gain and bias.
    Norm { dim: usize },
}

impl LayerSpec {
    /// Output `(tokens, dim)` for an input `(tokens, dim)`.
    pub fn output_shape(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let (n, d) = input;
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if d != in_channels {
                    return Err(Error::shape(
                        "conv-block",
                        format!("expects {in_channels} channels, input has {d}"),
                    ));
                }
                let n_out = conv_out_len(n, kernel, stride, padding).ok_or_else(|| {
                    Error::shape("conv-block", format!("kernel {kernel} does not fit length {n}"))
                })?;
                Ok((n_out, out_channels))
            }
            LayerSpec::Attention { dim, .. } | LayerSpec::Norm { dim } => {
                if d != dim {
                    return Err(Error::shape(
                        "block",
                        format!("expects dim {dim}, input has {d}"),
                    ));
                }
                Ok((n, d))
            }
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![kernel, in_channels, out_channels], vec![out_channels]],
            LayerSpec::Attention { dim, hidden } => vec![
                vec![dim],
                vec![dim],
                vec![dim, dim],
                vec![dim, dim],
                vec![dim, dim],
                vec![dim, dim],
                vec![dim],
                vec![dim],
                vec![dim, hidden],
                vec![hidden],
                vec![hidden, dim],
                vec![dim],
            ],
            LayerSpec::Norm { dim } => vec![vec![dim], vec![dim]],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv-block",
            LayerSpec::Attention { .. } => "attention-block",
            LayerSpec::Norm { .. } => "norm-block",
        }
    }
}

/// One block with its parameters, in declaration order.
#[derive(Clone, Debug)]
pub struct Layer {
    spec: LayerSpec,
    params: Vec<Parameter>,
}

impl Layer {
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let params = match spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let std = (2.0 / (kernel * in_channels) as f64).sqrt();
                vec![
                    Tensor::randn(&[kernel, in_channels, out_channels], std, rng),
                    Tensor::zeros(&[out_channels]),
                ]
            }
            LayerSpec::Attention { dim, hidden } => {
                let s = 1.0 / (dim as f64).sqrt();
                vec![
                    Tensor::full(&[dim], 1.0),
                    Tensor::zeros(&[dim]),
                    Tensor::randn(&[dim, dim], s, rng),
                    Tensor::randn(&[dim, dim], s, rng),
                    Tensor::randn(&[dim, dim], s, rng),
                    Tensor::randn(&[dim, dim], s * 0.5, rng),
                    Tensor::full(&[dim], 1.0),
                    Tensor::zeros(&[dim]),
                    Tensor::randn(&[dim, hidden], s, rng),
                    Tensor::zeros(&[hidden]),
                    Tensor::randn(&[hidden, dim], 0.5 / (hidden as f64).sqrt(), rng),
                    Tensor::zeros(&[dim]),
                ]
            }
            LayerSpec::Norm { dim } => vec![Tensor::full(&[dim], 1.0), Tensor::zeros(&[dim])],
        };
        Self {
            spec,
            params: params.into_iter().map(|t| Parameter::new(t, true)).collect(),
        }
    }

    pub(crate) fn from_parts(spec: LayerSpec, values: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if shapes.len() != values.len()
            || shapes.iter().zip(&values).any(|(s, v)| s.as_slice() != v.shape())
        {
            return Err(Error::Format(format!(
                "parameter blocks do not match {} layout",
                spec.kind_name()
            )));
        }
        Ok(Self {
            spec,
            params: values.into_iter().map(|t| Parameter::new(t, false)).collect(),
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn forward<O: Ops>(&self, o: &mut O, x: &O::Value) -> Result<O::Value> {
        let p: Vec<O::Value> = self.params.iter().map(|p| o.param(p)).collect();
        match self.spec {
            LayerSpec::Conv { stride, padding, .. } => {
                let y = o.apply(Prim::Conv1d { stride, padding }, &[x, &p[0]])?;
                let y = o.add_bias(&y, &p[1])?;
                o.gelu(&y)
            }
            LayerSpec::Attention { .. } => {
                let a = norm_affine(o, x, &p[0], &p[1])?;
                let q = o.matmul(&a, &p[2])?;
                let k = o.matmul(&a, &p[3])?;
                let v = o.matmul(&a, &p[4])?;
                let att = o.apply(Prim::Attention, &[&q, &k, &v])?;
                let att = o.matmul(&att, &p[5])?;
                let y = o.add(x, &att)?;
                let c = norm_affine(o, &y, &p[6], &p[7])?;
                let f = o.matmul(&c, &p[8])?;
                let f = o.add_bias(&f, &p[9])?;
                let f = o.gelu(&f)?;
                let f = o.matmul(&f, &p[10])?;
                let f = o.add_bias(&f, &p[11])?;
                o.add(&y, &f)
            }
            LayerSpec::Norm { .. } => norm_affine(o, x, &p[0], &p[1]),
        }
    }
}

fn norm_affine<O: Ops>(o: &mut O, x: &O::Value, gain: &O::Value, bias: &O::Value) -> Result<O::Value> {
    let n = o.apply(Prim::LayerNorm { eps: LN_EPS }, &[x])?;
    let n = o.mul_bcast(&n, gain)?;
    o.add_bias(&n, bias)
}

/// Encoder architectures available to experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Strided convolutions widening the channel axis, closed by a norm block.
    Conv,
    /// The same stack at twice the width.
    ConvWide,
    /// Patch-embedding convolution, attention blocks, then a norm block.
    Attention,
}

impl Architecture {
    /// Default layer stack for an input of `(length, channels)`.
    pub fn layer_specs(self, input: (usize, usize)) -> Vec<LayerSpec> {
        let (len, ch) = input;
        match self {
            Architecture::Conv => conv_stack(ch, [16, 24, 24, 32]),
            Architecture::ConvWide => conv_stack(ch, [32, 48, 48, 64]),
            Architecture::Attention => {
                let patch = (len / 16).max(1);
                let dim = 16;
                vec![
                    LayerSpec::Conv {
                        in_channels: ch,
                        out_channels: dim,
                        kernel: patch,
                        stride: patch,
                        padding: 0,
                    },
                    LayerSpec::Attention { dim, hidden: 32 },
                    LayerSpec::Attention { dim, hidden: 32 },
                    LayerSpec::Attention { dim, hidden: 32 },
                    LayerSpec::Norm { dim },
                ]
            }
        }
    }
}

fn conv_stack(ch: usize, w: [usize; 4]) -> Vec<LayerSpec> {
    let conv = |in_channels, out_channels, kernel, stride| LayerSpec::Conv {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding: kernel / 2,
    };
    vec![
        conv(ch, w[0], 5, 1),
        conv(w[0], w[1], 5, 2),
        conv(w[1], w[2], 3, 2),
        conv(w[2], w[3], 3, 1),
        LayerSpec::Norm { dim: w[3] },
    ]
}

/// An ordered stack of blocks for one modality.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    modality: String,
    input_shape: (usize, usize),
    layers: Vec<Layer>,
    shapes: Vec<(usize, usize)>,
}

impl EncoderModel {
    pub fn new<R: Rng + ?Sized>(
        modality: impl Into<String>,
        input_shape: (usize, usize),
        specs: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = specs.into_iter().map(|s| Layer::init(s, rng)).collect();
        Self::from_layers(modality.into(), input_shape, layers)
    }

    pub fn build<R: Rng + ?Sized>(
        arch: Architecture,
        modality: impl Into<String>,
        input_shape: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(modality, input_shape, arch.layer_specs(input_shape), rng)
    }

    pub(crate) fn from_layers(modality: String, input_shape: (usize, usize), layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an encoder needs at least one layer"));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape;
        for (i, l) in layers.iter().enumerate() {
            cur = l
                .spec
                .output_shape(cur)
                .map_err(|e| Error::invalid(format!("layer {}: {e}", i + 1)))?;
            shapes.push(cur);
        }
        Ok(Self {
            modality,
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `(tokens, dim)` of every layer's output, first layer first.
    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    /// Shape of the representation entering layer `l + 1`; `l = 0` is the input.
    pub fn shape_after(&self, l: usize) -> Result<(usize, usize)> {
        match l {
            0 => Ok(self.input_shape),
            l if l <= self.layers.len() => Ok(self.shapes[l - 1]),
            _ => Err(Error::invalid(format!(
                "layer index {l} out of range 0..={}",
                self.layers.len()
            ))),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Parameter::len).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_trainable(trainable);
        }
    }

    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().all(|p| !p.trainable())
    }

    /// Copy with fresh parameter ids, so it can share a tape with the original.
    pub fn detached(&self) -> Self {
        let mut m = self.clone();
        for l in &mut m.layers {
            for p in &mut l.params {
                *p = p.detached();
            }
        }
        m
    }

    /// Copies of every parameter value, for before/after comparisons.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params().map(|p| p.value().clone()).collect()
    }

    fn check_rep<O: Ops>(&self, o: &O, h: &O::Value, after: usize, what: &'static str) -> Result<()> {
        let (n, d) = self.shape_after(after)?;
        let s = o.value(h).shape();
        if s.len() != 3 || s[1] != n || s[2] != d {
            return Err(Error::shape(
                what,
                format!("expected [batch, {n}, {d}] after layer {after}, got {s:?}"),
            ));
        }
        Ok(())
    }

    /// Runs layers `from + 1 ..= to` on a representation that entered after layer `from`.
    pub fn forward_range<O: Ops>(&self, o: &mut O, h: &O::Value, from: usize, to: usize) -> Result<O::Value> {
        if from > to || to > self.layers.len() {
            return Err(Error::invalid(format!(
                "layer range {from}..{to} invalid for {} layers",
                self.layers.len()
            )));
        }
        self.check_rep(o, h, from, "forward")?;
        let mut cur = h.clone();
        for layer in &self.layers[from..to] {
            cur = layer.forward(o, &cur)?;
        }
        Ok(cur)
    }

    /// Output of layer `m` (1-based) for input `x`.
    pub fn forward_prefix<O: Ops>(&self, o: &mut O, x: &O::Value, m: usize) -> Result<O::Value> {
        if m == 0 || m > self.layers.len() {
            return Err(Error::invalid(format!(
                "prefix position {m} out of range 1..={}",
                self.layers.len()
            )));
        }
        self.forward_range(o, x, 0, m)
    }

    /// Final representation from `h`, the output of layer `l`. `l = L` returns `h`.
    pub fn forward_suffix<O: Ops>(&self, o: &mut O, h: &O::Value, l: usize) -> Result<O::Value> {
        self.forward_range(o, h, l, self.layers.len())
    }

    pub fn forward<O: Ops>(&self, o: &mut O, x: &O::Value) -> Result<O::Value> {
        self.forward_range(o, x, 0, self.layers.len())
    }

    /// Every layer's output for a batch, first layer first.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_rep(&Eval, x, 0, "forward")?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&mut Eval, &cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Unrecorded [`EncoderModel::forward_prefix`].
    pub fn eval_prefix(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        self.forward_prefix(&mut Eval, x, m)
    }

    pub fn eval_suffix(&self, h: &Tensor, l: usize) -> Result<Tensor> {
        self.forward_suffix(&mut Eval, h, l)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(&mut Eval, x)
    }
}

/// Mean-pool over tokens followed by a linear map to class logits.
#[derive(Clone, Debug)]
pub struct TaskHead {
    weight: Parameter,
    bias: Parameter,
}

impl TaskHead {
    /// Small random init; `std = 0` gives the all-zero head.
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Parameter::new(Tensor::randn(&[dim, classes], std, rng), true),
            bias: Parameter::new(Tensor::zeros(&[classes]), true),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape(
                "task head",
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self {
            weight: Parameter::new(weight, false),
            bias: Parameter::new(bias, false),
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn weight(&self) -> &Parameter {
        &self.weight
    }

    pub fn bias(&self) -> &Parameter {
        &self.bias
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        [&self.weight, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        [&mut self.weight, &mut self.bias].into_iter()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight.set_trainable(trainable);
        self.bias.set_trainable(trainable);
    }

    /// Logits from an already pooled `[batch, dim]` input.
    pub fn logits_pooled<O: Ops>(&self, o: &mut O, pooled: &O::Value) -> Result<O::Value> {
        let w = o.param(&self.weight);
        let b = o.param(&self.bias);
        let y = o.matmul(pooled, &w)?;
        o.add_bias(&y, &b)
    }

    /// Logits from a `[batch, tokens, dim]` final representation.
    pub fn logits<O: Ops>(&self, o: &mut O, h: &O::Value) -> Result<O::Value> {
        let s = o.value(h).shape();
        if s.len() != 3 || s[2] != self.dim() {
            return Err(Error::shape(
                "task head",
                format!("expects [batch, tokens, {}], got {s:?}", self.dim()),
            ));
        }
        let pooled = o.mean_axis(h, 1)?;
        self.logits_pooled(o, &pooled)
    }

    pub fn probabilities(&self, h: &Tensor) -> Result<Tensor> {
        let mut e = Eval;
        let z = self.logits(&mut e, h)?;
        e.softmax(&z)
    }
}

/// Class probabilities of `head ∘ model` for a batch.
pub fn predict(model: &EncoderModel, head: &TaskHead, x: &Tensor) -> Result<Tensor> {
    let (_, d) = model.shape_after(model.layer_count())?;
    if head.dim() != d {
        return Err(Error::shape(
            "predict",
            format!("head expects dim {}, encoder emits {d}", head.dim()),
        ));
    }
    head.probabilities(&model.eval(x)?)
}

/// Row-wise arg-max; ties go to the lowest class index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let c = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks(c)
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

/// Runs `f` over `x` in chunks along the batch axis and concatenates the results.
pub fn batched<F>(x: &Tensor, chunk: usize, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let n = x.outer();
    let chunk = chunk.max(1);
    let mut parts = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        parts.push(f(&x.gather_outer(&idx))?);
        start = end;
    }
    Tensor::concat_outer(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn homogeneous(layers: usize) -> EncoderModel {
        let specs = (0..layers).map(|_| LayerSpec::Attention { dim: 16, hidden: 16 }).collect();
        EncoderModel::new("toy", (32, 16), specs, &mut rng()).unwrap()
    }

    #[test]
    fn homogeneous_stack_shapes() {
        assert_eq!(homogeneous(4).layer_shapes(), &[(32, 16); 4]);
    }

    #[test]
    fn conv_halving_shape_oracle() {
        let specs = vec![
            LayerSpec::Conv { in_channels: 2, out_channels: 8, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Conv { in_channels: 8, out_channels: 8, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Conv { in_channels: 8, out_channels: 8, kernel: 3, stride: 2, padding: 1 },
        ];
        let m = EncoderModel::new("toy", (64, 2), specs, &mut rng()).unwrap();
        assert_eq!(m.layer_shapes(), &[(32, 8), (16, 8), (8, 8)]);
        let x = Tensor::randn(&[2, 64, 2], 1.0, &mut rng());
        for (i, h) in m.forward_all(&x).unwrap().iter().enumerate() {
            let (n, d) = m.layer_shapes()[i];
            assert_eq!(h.shape(), &[2, n, d]);
        }
    }

    #[test]
    fn empty_model_rejected() {
        assert!(EncoderModel::new("toy", (8, 2), vec![], &mut rng()).is_err());
    }

    #[test]
    fn prefix_at_last_layer_is_full_forward() {
        let m = EncoderModel::build(Architecture::Attention, "a", (64, 4), &mut rng()).unwrap();
        let x = Tensor::randn(&[3, 64, 4], 1.0, &mut rng());
        assert_eq!(m.eval_prefix(&x, m.layer_count()).unwrap(), m.eval(&x).unwrap());
    }

    #[test]
    fn first_prefix_is_conv_block() {
        let m = EncoderModel::build(Architecture::Conv, "b", (32, 3), &mut rng()).unwrap();
        let x = Tensor::randn(&[2, 32, 3], 1.0, &mut rng());
        let direct = m.layers()[0].forward(&mut Eval, &x).unwrap();
        assert_eq!(m.eval_prefix(&x, 1).unwrap(), direct);
    }

    #[test]
    fn suffix_at_last_layer_is_identity() {
        let m = homogeneous(3);
        let h = Tensor::randn(&[2, 32, 16], 1.0, &mut rng());
        assert_eq!(m.eval_suffix(&h, 3).unwrap(), h);
    }

    #[test]
    fn composition_identity_every_position() {
        for arch in [Architecture::Conv, Architecture::Attention] {
            let m = EncoderModel::build(arch, "x", (64, 4), &mut rng()).unwrap();
            let x = Tensor::randn(&[4, 64, 4], 1.0, &mut rng());
            let full = m.eval(&x).unwrap();
            for l in 1..=m.layer_count() {
                let h = m.eval_prefix(&x, l).unwrap();
                assert_eq!(m.eval_suffix(&h, l).unwrap(), full, "{arch:?} l={l}");
            }
        }
    }

    #[test]
    fn suffix_rejects_wrong_shape() {
        let m = homogeneous(2);
        let h = Tensor::zeros(&[1, 31, 16]);
        assert!(matches!(m.eval_suffix(&h, 1), Err(Error::Shape { .. })));
        assert!(m.eval_prefix(&Tensor::zeros(&[1, 32, 16]), 3).is_err());
        assert!(m.eval_prefix(&Tensor::zeros(&[1, 32, 16]), 0).is_err());
    }

    #[test]
    fn suffix_is_continuous_in_injection() {
        let m = EncoderModel::build(Architecture::Attention, "a", (64, 4), &mut rng()).unwrap();
        let x = Tensor::randn(&[1, 64, 4], 1.0, &mut rng());
        let h = m.eval_prefix(&x, 2).unwrap();
        let base = m.eval_suffix(&h, 2).unwrap();
        let dir = Tensor::randn(h.shape(), 1.0, &mut rng());
        let mut last = f64::INFINITY;
        for k in 1..6 {
            let scale = 10f64.powi(-k);
            let mut p = h.clone();
            for (v, d) in p.data_mut().iter_mut().zip(dir.data()) {
                *v += scale * d;
            }
            let delta = m.eval_suffix(&p, 2).unwrap().max_abs_diff(&base);
            assert!(delta < last);
            last = delta;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn zero_head_is_uniform() {
        let m = homogeneous(1);
        let head = TaskHead::new(16, 4, 0.0, &mut rng());
        let x = Tensor::randn(&[2, 32, 16], 1.0, &mut rng());
        let p = predict(&m, &head, &x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(argmax_rows(&p), vec![0, 0]);
    }

    #[test]
    fn probabilities_normalized() {
        let m = EncoderModel::build(Architecture::Conv, "b", (32, 3), &mut rng()).unwrap();
        let head = TaskHead::new(32, 3, 1.0, &mut rng());
        let x = Tensor::randn(&[5, 32, 3], 1.0, &mut rng());
        let p = predict(&m, &head, &x).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn head_class_mismatch_rejected() {
        let m = homogeneous(1);
        let head = TaskHead::new(8, 3, 0.1, &mut rng());
        assert!(predict(&m, &head, &Tensor::zeros(&[1, 32, 16])).is_err());
    }
}
