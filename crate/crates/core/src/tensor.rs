//! Dense row-major `f64` tensors and the primitive kernels the encoders,
//! bridge and losses are built from.
//!
//! Every primitive has a forward kernel and a vector-Jacobian product. The
//! same forward kernel runs whether or not a computation is being recorded,
//! which is what makes recorded and unrecorded evaluation bit-identical.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Number of slices along the first axis.
    pub fn outer(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    fn inner(&self) -> usize {
        self.data.len() / self.outer()
    }

    /// Slice `i` along the first axis, with that axis dropped.
    pub fn index_outer(&self, i: usize) -> Tensor {
        let inner = self.inner();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Gathers slices along the first axis.
    pub fn gather_outer(&self, indices: &[usize]) -> Tensor {
        let inner = self.inner();
        let mut data = Vec::with_capacity(inner * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Concatenates along the first axis.
    pub fn concat_outer(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero tensors"))?;
        let mut outer = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            outer += t.outer();
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

/// The primitive operations. Each consumes input tensors and yields one output.
#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    /// `[.., k] x [k, m] -> [.., m]`; leading axes of the left operand are flattened into rows.
    MatMul,
    /// `[b, n, k] x [b, k, m] -> [b, n, m]`.
    BatchMatMul,
    /// Swaps the two trailing axes.
    TransposeLast2,
    /// `x [b, t, c_in]`, `w [k, c_in, c_out]` -> `[b, t_out, c_out]`, zero padding.
    Conv1d { stride: usize, padding: usize },
    /// Normalizes the last axis to zero mean and unit variance (no affine terms).
    LayerNorm { eps: f64 },
    /// Single-head `softmax(q kᵀ / sqrt(d)) v` over `[b, n, d]` operands.
    Attention,
    Add,
    Sub,
    Mul,
    /// Right operand's shape is a suffix of the left's; it is repeated over the leading axes.
    AddBroadcast,
    MulBroadcast,
    /// `scale * x + shift`.
    Affine { scale: f64, shift: f64 },
    /// Tanh approximation of GELU.
    Gelu,
    Relu,
    Abs,
    MeanAxis { axis: usize },
    MaxAxis { axis: usize },
    SumAll,
    MeanAll,
    Reshape { shape: Vec<usize> },
    /// Softmax over the last axis.
    Softmax,
    LogSoftmax,
    /// Cosine similarity of matching rows (last axis); zero-norm rows give 0.
    CosineRows,
    /// Scales each row (last axis) to unit norm; zero rows stay zero.
    L2NormalizeRows,
}

fn arity(prim: &Prim) -> usize {
    use Prim::*;
    match prim {
        Attention => 3,
        MatMul | BatchMatMul | Conv1d { .. } | Add | Sub | Mul | AddBroadcast | MulBroadcast
        | CosineRows => 2,
        _ => 1,
    }
}

impl Prim {
    pub fn name(&self) -> &'static str {
        use Prim::*;
        match self {
            MatMul => "matmul",
            BatchMatMul => "batch_matmul",
            TransposeLast2 => "transpose",
            Conv1d { .. } => "conv1d",
            LayerNorm { .. } => "layer_norm",
            Attention => "attention",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            AddBroadcast => "add_broadcast",
            MulBroadcast => "mul_broadcast",
            Affine { .. } => "affine",
            Gelu => "gelu",
            Relu => "relu",
            Abs => "abs",
            MeanAxis { .. } => "mean_axis",
            MaxAxis { .. } => "max_axis",
            SumAll => "sum",
            MeanAll => "mean",
            Reshape { .. } => "reshape",
            Softmax => "softmax",
            LogSoftmax => "log_softmax",
            CosineRows => "cosine_rows",
            L2NormalizeRows => "l2_normalize",
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != arity(self) {
            return Err(Error::shape(
                self.name(),
                format!("expected {} inputs, got {}", arity(self), inputs.len()),
            ));
        }
        use Prim::*;
        match self {
            MatMul => matmul(inputs[0], inputs[1]),
            BatchMatMul => batch_matmul(inputs[0], inputs[1]),
            TransposeLast2 => transpose_last2(inputs[0]),
            Conv1d { stride, padding } => conv1d(inputs[0], inputs[1], *stride, *padding),
            LayerNorm { eps } => layer_norm(inputs[0], *eps),
            Attention => attention(inputs[0], inputs[1], inputs[2]).map(|(out, _)| out),
            Add => same_shape(self, inputs).map(|_| inputs[0].zip(inputs[1], |a, b| a + b)),
            Sub => same_shape(self, inputs).map(|_| inputs[0].zip(inputs[1], |a, b| a - b)),
            Mul => same_shape(self, inputs).map(|_| inputs[0].zip(inputs[1], |a, b| a * b)),
            AddBroadcast => broadcast(self, inputs[0], inputs[1], |a, b| a + b),
            MulBroadcast => broadcast(self, inputs[0], inputs[1], |a, b| a * b),
            Affine { scale, shift } => Ok(inputs[0].map(|x| scale * x + shift)),
            Gelu => Ok(inputs[0].map(gelu)),
            Relu => Ok(inputs[0].map(|x| x.max(0.0))),
            Abs => Ok(inputs[0].map(f64::abs)),
            MeanAxis { axis } => reduce_axis(inputs[0], *axis, Reduce::Mean).map(|(t, _)| t),
            MaxAxis { axis } => reduce_axis(inputs[0], *axis, Reduce::Max).map(|(t, _)| t),
            SumAll => Ok(Tensor::scalar(inputs[0].data.iter().sum())),
            MeanAll => Ok(Tensor::scalar(
                inputs[0].data.iter().sum::<f64>() / inputs[0].len() as f64,
            )),
            Reshape { shape } => inputs[0]
                .reshape(shape)
                .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", inputs[0].shape))),
            Softmax => Ok(softmax_last(inputs[0])),
            LogSoftmax => Ok(log_softmax_last(inputs[0])),
            CosineRows => cosine_rows(inputs[0], inputs[1]),
            L2NormalizeRows => Ok(l2_normalize_rows(inputs[0])),
        }
    }

    /// Vector-Jacobian product: given `grad` (same shape as `output`), returns the
    /// gradient for each input whose `needs` flag is set.
    pub fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        use Prim::*;
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let grads = match self {
            MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (k, m) = (b.shape[0], b.shape[1]);
                let rows = a.len() / k;
                let da = want(0).then(|| {
                    let mut d = vec![0.0; a.len()];
                    for i in 0..rows {
                        let g = &grad.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &b.data[p * m..(p + 1) * m];
                            d[i * k + p] = dot(g, brow);
                        }
                    }
                    Tensor { shape: a.shape.clone(), data: d }
                });
                let db = want(1).then(|| {
                    let mut d = vec![0.0; b.len()];
                    for i in 0..rows {
                        let g = &grad.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            axpy(a.data[i * k + p], g, &mut d[p * m..(p + 1) * m]);
                        }
                    }
                    Tensor { shape: b.shape.clone(), data: d }
                });
                vec![da, db]
            }
            BatchMatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bt = transpose_last2(b)?;
                let at = transpose_last2(a)?;
                let da = if want(0) { Some(batch_matmul(grad, &bt)?) } else { None };
                let db = if want(1) { Some(batch_matmul(&at, grad)?) } else { None };
                vec![da, db]
            }
            TransposeLast2 => vec![Some(transpose_last2(grad)?)],
            Conv1d { stride, padding } => {
                let (dx, dw) = conv1d_vjp(inputs[0], inputs[1], grad, *stride, *padding, want(0), want(1));
                vec![dx, dw]
            }
            LayerNorm { eps } => vec![Some(layer_norm_vjp(inputs[0], output, grad, *eps))],
            Attention => attention_vjp(inputs[0], inputs[1], inputs[2], grad, needs)?,
            Add => vec![Some(grad.clone()), Some(grad.clone())],
            Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            Mul => vec![
                want(0).then(|| grad.zip(inputs[1], |g, b| g * b)),
                want(1).then(|| grad.zip(inputs[0], |g, a| g * a)),
            ],
            AddBroadcast => {
                let b = inputs[1];
                let mut db = vec![0.0; b.len()];
                for chunk in grad.data.chunks(b.len()) {
                    for (d, g) in db.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                vec![Some(grad.clone()), Some(Tensor { shape: b.shape.clone(), data: db })]
            }
            MulBroadcast => {
                let (a, b) = (inputs[0], inputs[1]);
                let n = b.len();
                let da = want(0).then(|| {
                    let data = grad
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * b.data[i % n])
                        .collect();
                    Tensor { shape: a.shape.clone(), data }
                });
                let db = want(1).then(|| {
                    let mut d = vec![0.0; n];
                    for (i, (g, x)) in grad.data.iter().zip(&a.data).enumerate() {
                        d[i % n] += g * x;
                    }
                    Tensor { shape: b.shape.clone(), data: d }
                });
                vec![da, db]
            }
            Affine { scale, .. } => vec![Some(grad.map(|g| g * scale))],
            Gelu => vec![Some(grad.zip(inputs[0], |g, x| g * gelu_grad(x)))],
            Relu => vec![Some(grad.zip(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))],
            Abs => vec![Some(grad.zip(inputs[0], |g, x| g * sign(x)))],
            MeanAxis { axis } => vec![Some(expand_axis(inputs[0], grad, *axis, None))],
            MaxAxis { axis } => {
                let (_, arg) = reduce_axis(inputs[0], *axis, Reduce::Max)?;
                vec![Some(expand_axis(inputs[0], grad, *axis, Some(&arg)))]
            }
            SumAll => vec![Some(Tensor::full(&inputs[0].shape, grad.item()))],
            MeanAll => {
                let n = inputs[0].len() as f64;
                vec![Some(Tensor::full(&inputs[0].shape, grad.item() / n))]
            }
            Reshape { .. } => vec![Some(Tensor {
                shape: inputs[0].shape.clone(),
                data: grad.data.clone(),
            })],
            Softmax => {
                let d = last_dim(output);
                let mut out = vec![0.0; grad.len()];
                for ((o, y), g) in out.chunks_mut(d).zip(output.data.chunks(d)).zip(grad.data.chunks(d)) {
                    let s = dot(y, g);
                    for j in 0..d {
                        o[j] = y[j] * (g[j] - s);
                    }
                }
                vec![Some(Tensor { shape: output.shape.clone(), data: out })]
            }
            LogSoftmax => {
                let d = last_dim(output);
                let mut out = vec![0.0; grad.len()];
                for ((o, y), g) in out.chunks_mut(d).zip(output.data.chunks(d)).zip(grad.data.chunks(d)) {
                    let s: f64 = g.iter().sum();
                    for j in 0..d {
                        o[j] = g[j] - y[j].exp() * s;
                    }
                }
                vec![Some(Tensor { shape: output.shape.clone(), data: out })]
            }
            CosineRows => {
                let (da, db) = cosine_rows_vjp(inputs[0], inputs[1], output, grad);
                vec![Some(da), Some(db)]
            }
            L2NormalizeRows => vec![Some(l2_normalize_vjp(inputs[0], output, grad))],
        };
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// kernels

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape.last().copied().unwrap_or(1)
}

fn same_shape(prim: &Prim, inputs: &[&Tensor]) -> Result<()> {
    if inputs[0].shape != inputs[1].shape {
        return Err(Error::shape(
            prim.name(),
            format!("{:?} vs {:?}", inputs[0].shape, inputs[1].shape),
        ));
    }
    Ok(())
}

fn broadcast(prim: &Prim, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if b.rank() > a.rank() || a.shape[a.rank() - b.rank()..] != b.shape[..] {
        return Err(Error::shape(
            prim.name(),
            format!("{:?} is not a suffix of {:?}", b.shape, a.shape),
        ));
    }
    let n = b.len();
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data[i % n]))
        .collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 1 || b.rank() != 2 || last_dim(a) != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (k, m) = (b.shape[0], b.shape[1]);
    let rows = a.len() / k;
    let mut out = vec![0.0; rows * m];
    for i in 0..rows {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(a.data[i * k + p], &b.data[p * m..(p + 1) * m], orow);
        }
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = m;
    Tensor::new(shape, out)
}

fn batch_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
        return Err(Error::shape(
            "batch_matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (bs, n, k, m) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
    let mut out = vec![0.0; bs * n * m];
    for s in 0..bs {
        let ao = s * n * k;
        let bo = s * k * m;
        let oo = s * n * m;
        for i in 0..n {
            let orow = &mut out[oo + i * m..oo + (i + 1) * m];
            for p in 0..k {
                axpy(a.data[ao + i * k + p], &b.data[bo + p * m..bo + (p + 1) * m], orow);
            }
        }
    }
    Tensor::new(vec![bs, n, m], out)
}

fn transpose_last2(a: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 {
        return Err(Error::shape("transpose", format!("rank {} < 2", a.rank())));
    }
    let r = a.rank();
    let (n, m) = (a.shape[r - 2], a.shape[r - 1]);
    let outer = a.len() / (n * m);
    let mut out = vec![0.0; a.len()];
    for s in 0..outer {
        let o = s * n * m;
        for i in 0..n {
            for j in 0..m {
                out[o + j * n + i] = a.data[o + i * m + j];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

/// Output length of a zero-padded 1-D convolution, if the kernel fits.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len + 2 * padding < kernel {
        return None;
    }
    Some((len + 2 * padding - kernel) / stride + 1)
}

fn conv1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 3 || x.shape[2] != w.shape[1] {
        return Err(Error::shape("conv1d", format!("input {:?}, kernel {:?}", x.shape, w.shape)));
    }
    let (bs, t, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (k, cout) = (w.shape[0], w.shape[2]);
    let tout = conv_out_len(t, k, stride, padding).ok_or_else(|| {
        Error::shape(
            "conv1d",
            format!("kernel {k} does not fit length {t} with padding {padding}, stride {stride}"),
        )
    })?;
    let mut out = vec![0.0; bs * tout * cout];
    for b in 0..bs {
        for to in 0..tout {
            let orow = &mut out[(b * tout + to) * cout..(b * tout + to + 1) * cout];
            for kk in 0..k {
                let ti = (to * stride + kk) as isize - padding as isize;
                if ti < 0 || ti as usize >= t {
                    continue;
                }
                let xrow = &x.data[(b * t + ti as usize) * cin..(b * t + ti as usize + 1) * cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    axpy(xv, &w.data[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout], orow);
                }
            }
        }
    }
    Tensor::new(vec![bs, tout, cout], out)
}

fn conv1d_vjp(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    padding: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (bs, t, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (k, cout) = (w.shape[0], w.shape[2]);
    let tout = grad.shape[1];
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; w.len()]);
    for b in 0..bs {
        for to in 0..tout {
            let g = &grad.data[(b * tout + to) * cout..(b * tout + to + 1) * cout];
            for kk in 0..k {
                let ti = (to * stride + kk) as isize - padding as isize;
                if ti < 0 || ti as usize >= t {
                    continue;
                }
                let xo = (b * t + ti as usize) * cin;
                for ci in 0..cin {
                    let wo = (kk * cin + ci) * cout;
                    if let Some(dx) = dx.as_mut() {
                        dx[xo + ci] += dot(g, &w.data[wo..wo + cout]);
                    }
                    if let Some(dw) = dw.as_mut() {
                        axpy(x.data[xo + ci], g, &mut dw[wo..wo + cout]);
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor { shape: x.shape.clone(), data: d }),
        dw.map(|d| Tensor { shape: w.shape.clone(), data: d }),
    )
}

fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let d = last_dim(x);
    let mut out = vec![0.0; x.len()];
    for (o, row) in out.chunks_mut(d).zip(x.data.chunks(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (oj, xj) in o.iter_mut().zip(row) {
            *oj = (xj - mean) * inv;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

fn layer_norm_vjp(x: &Tensor, y: &Tensor, grad: &Tensor, eps: f64) -> Tensor {
    let d = last_dim(x);
    let mut out = vec![0.0; x.len()];
    for (((o, row), yr), g) in out
        .chunks_mut(d)
        .zip(x.data.chunks(d))
        .zip(y.data.chunks(d))
        .zip(grad.data.chunks(d))
    {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let gm = g.iter().sum::<f64>() / d as f64;
        let gy = dot(g, yr) / d as f64;
        for j in 0..d {
            o[j] = inv * (g[j] - gm - yr[j] * gy);
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

/// Returns the attention output and the attention weights.
fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.rank() != 3
        || k.rank() != 3
        || v.rank() != 3
        || q.shape[0] != k.shape[0]
        || k.shape[0] != v.shape[0]
        || q.shape[2] != k.shape[2]
        || k.shape[1] != v.shape[1]
    {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape, k.shape, v.shape),
        ));
    }
    let scale = 1.0 / (q.shape[2] as f64).sqrt();
    let scores = batch_matmul(q, &transpose_last2(k)?)?;
    let weights = softmax_last(&scores.map(|s| s * scale));
    let out = batch_matmul(&weights, v)?;
    Ok((out, weights))
}

fn attention_vjp(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let scale = 1.0 / (q.shape[2] as f64).sqrt();
    let (_, p) = attention(q, k, v)?;
    let dv = if want(2) {
        Some(batch_matmul(&transpose_last2(&p)?, grad)?)
    } else {
        None
    };
    if !want(0) && !want(1) {
        return Ok(vec![None, None, dv]);
    }
    let dp = batch_matmul(grad, &transpose_last2(v)?)?;
    // softmax backward, then the 1/sqrt(d) scaling
    let n = last_dim(&p);
    let mut ds = vec![0.0; p.len()];
    for ((o, y), g) in ds.chunks_mut(n).zip(p.data.chunks(n)).zip(dp.data.chunks(n)) {
        let s = dot(y, g);
        for j in 0..n {
            o[j] = y[j] * (g[j] - s) * scale;
        }
    }
    let ds = Tensor { shape: p.shape.clone(), data: ds };
    let dq = if want(0) { Some(batch_matmul(&ds, k)?) } else { None };
    let dk = if want(1) {
        Some(batch_matmul(&transpose_last2(&ds)?, q)?)
    } else {
        None
    };
    Ok(vec![dq, dk, dv])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Copy)]
enum Reduce {
    Mean,
    Max,
}

/// Reduces one axis; also returns the arg-max offsets (empty for means).
fn reduce_axis(x: &Tensor, axis: usize, how: Reduce) -> Result<(Tensor, Vec<usize>)> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "reduce",
            format!("axis {axis} out of range for {:?}", x.shape),
        ));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let n = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    let mut arg = Vec::new();
    match how {
        Reduce::Mean => {
            for o in 0..outer {
                for a in 0..n {
                    let src = &x.data[(o * n + a) * inner..(o * n + a + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            for v in out.iter_mut() {
                *v /= n as f64;
            }
        }
        Reduce::Max => {
            arg = vec![0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for a in 0..n {
                        let v = x.data[(o * n + a) * inner + i];
                        if v > best {
                            best = v;
                            at = a;
                        }
                    }
                    out[o * inner + i] = best;
                    arg[o * inner + i] = at;
                }
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Ok((Tensor { shape, data: out }, arg))
}

/// Inverse of [`reduce_axis`] for gradients: spreads `grad` back over `axis`.
fn expand_axis(x: &Tensor, grad: &Tensor, axis: usize, argmax: Option<&[usize]>) -> Tensor {
    let outer: usize = x.shape[..axis].iter().product();
    let n = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let g = grad.data[o * inner + i];
            match argmax {
                Some(arg) => out[(o * n + arg[o * inner + i]) * inner + i] = g,
                None => {
                    for a in 0..n {
                        out[(o * n + a) * inner + i] = g / n as f64;
                    }
                }
            }
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

fn softmax_last(x: &Tensor) -> Tensor {
    let d = last_dim(x);
    let mut out = vec![0.0; x.len()];
    for (o, row) in out.chunks_mut(d).zip(x.data.chunks(d)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oj, xj) in o.iter_mut().zip(row) {
            *oj = (xj - mx).exp();
            s += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= s;
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

fn log_softmax_last(x: &Tensor) -> Tensor {
    let d = last_dim(x);
    let mut out = vec![0.0; x.len()];
    for (o, row) in out.chunks_mut(d).zip(x.data.chunks(d)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (oj, xj) in o.iter_mut().zip(row) {
            *oj = xj - lse;
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape || a.rank() == 0 {
        return Err(Error::shape("cosine_rows", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let d = last_dim(a);
    let data = a
        .data
        .chunks(d)
        .zip(b.data.chunks(d))
        .map(|(x, y)| {
            let nx = dot(x, x).sqrt();
            let ny = dot(y, y).sqrt();
            if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                dot(x, y) / (nx * ny)
            }
        })
        .collect();
    let shape = a.shape[..a.rank() - 1].to_vec();
    Ok(Tensor { shape, data })
}

fn cosine_rows_vjp(a: &Tensor, b: &Tensor, cos: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let d = last_dim(a);
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    for (r, (x, y)) in a.data.chunks(d).zip(b.data.chunks(d)).enumerate() {
        let nx = dot(x, x).sqrt();
        let ny = dot(y, y).sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        let (c, g) = (cos.data[r], grad.data[r]);
        for j in 0..d {
            da[r * d + j] = g * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
            db[r * d + j] = g * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
        }
    }
    (
        Tensor { shape: a.shape.clone(), data: da },
        Tensor { shape: b.shape.clone(), data: db },
    )
}

fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let d = last_dim(x);
    let mut out = vec![0.0; x.len()];
    for (o, row) in out.chunks_mut(d).zip(x.data.chunks(d)) {
        let n = dot(row, row).sqrt();
        if n > 0.0 {
            for (oj, xj) in o.iter_mut().zip(row) {
                *oj = xj / n;
            }
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

fn l2_normalize_vjp(x: &Tensor, y: &Tensor, grad: &Tensor) -> Tensor {
    let d = last_dim(x);
    let mut out = vec![0.0; x.len()];
    for (((o, row), yr), g) in out
        .chunks_mut(d)
        .zip(x.data.chunks(d))
        .zip(y.data.chunks(d))
        .zip(grad.data.chunks(d))
    {
        let n = dot(row, row).sqrt();
        if n == 0.0 {
            continue;
        }
        let yg = dot(yr, g);
        for j in 0..d {
            o[j] = (g[j] - yr[j] * yg) / n;
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}
