//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use modelbridge::autodiff::{Eval, NodeId, Ops, Parameter, Tape};
use modelbridge::bridge::BridgeParams;
use modelbridge::losses::{cross_entropy, mse, one_hot};
use modelbridge::model::{EncoderModel, Layer, LayerSpec, TaskHead};
use modelbridge::tensor::{Prim, Tensor};
use modelbridge::transfer::{alignment_loss, info_nce, AlignLoss};
use modelbridge::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..p).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gram_naive(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|a| x.iter().map(|b| dot(a, b)).collect()).collect()
}

/// Biased HSIC from its expectation form:
/// `1/n² Σ K_ij L_ij − 2/n³ Σ K_ij L_iq + 1/n⁴ Σ K_ij L_qr`.
pub fn hsic_double_sum(k: &[Vec<f64>], l: &[Vec<f64>]) -> f64 {
    let n = k.len();
    let nf = n as f64;
    let mut t1 = 0.0;
    let mut t2 = 0.0;
    let mut t3 = 0.0;
    for i in 0..n {
        for j in 0..n {
            t1 += k[i][j] * l[i][j];
            for q in 0..n {
                t2 += k[i][j] * l[i][q];
                for r in 0..n {
                    t3 += k[i][j] * l[q][r];
                }
            }
        }
    }
    t1 / (nf * nf) - 2.0 * t2 / (nf * nf * nf) + t3 / (nf * nf * nf * nf)
}

pub fn cka_naive(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let (k, l) = (gram_naive(x), gram_naive(y));
    hsic_double_sum(&k, &l) / (hsic_double_sum(&k, &k) * hsic_double_sum(&l, &l)).sqrt()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(p: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    while cols.len() < p {
        let mut v: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let d = dot(&v, c);
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= d * ci;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-3 {
            cols.push(v.iter().map(|x| x / norm).collect());
        }
    }
    (0..p).map(|i| (0..p).map(|j| cols[j][i]).collect()).collect()
}

pub fn matmul_rows(x: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| (0..q[0].len()).map(|j| r.iter().enumerate().map(|(k, v)| v * q[k][j]).sum()).collect())
        .collect()
}

/// Metrics recomputed by counting samples directly, without a confusion matrix.
pub struct NaiveMetrics {
    pub bacc: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
}

pub fn naive_metrics(y: &[usize], p: &[usize], classes: usize) -> NaiveMetrics {
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    let mut f1s = Vec::new();
    let mut weighted = 0.0;
    for c in 0..classes {
        let tp = y.iter().zip(p).filter(|(t, q)| **t == c && **q == c).count();
        let support = y.iter().filter(|t| **t == c).count();
        let predicted = p.iter().filter(|q| **q == c).count();
        if support > 0 {
            recall_sum += tp as f64 / support as f64;
            present += 1;
        }
        let prec = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let rec = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        weighted += f1 * support as f64;
        f1s.push(f1);
    }
    NaiveMetrics {
        bacc: recall_sum / present as f64,
        f1_macro: f1s.iter().sum::<f64>() / classes as f64,
        f1_weighted: weighted / y.len() as f64,
    }
}

pub type Objective = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

pub struct PrimCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Objective,
}

/// `Σ out ⊙ w` with a fixed random `w`, so every output entry carries a distinct weight.
fn weigh(t: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = t.value(&out).shape().to_vec();
    let w = t.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let m = t.mul(&out, &w)?;
    t.sum_all(&m)
}

fn case(name: &'static str, inputs: Vec<Tensor>, prim: Prim) -> PrimCase {
    PrimCase {
        name,
        inputs,
        f: Box::new(move |t, x| {
            let refs: Vec<&NodeId> = x.iter().collect();
            let out = t.apply(prim.clone(), &refs)?;
            weigh(t, out, 99)
        }),
    }
}

/// Values at least `gap` away from zero, for kinked primitives.
fn away_from_zero(shape: &[usize], gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = gap + r.random_range(0.0..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// One scalar objective per primitive, plus the composite losses.
pub fn primitive_cases() -> Vec<PrimCase> {
    let mut r = rng(7);
    let mut g = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut r);
    let mut cases = vec![
        case("matmul", vec![g(&[3, 4]), g(&[4, 2])], Prim::MatMul),
        case("matmul-3d-left", vec![g(&[2, 3, 4]), g(&[4, 2])], Prim::MatMul),
        case("batch_matmul", vec![g(&[2, 3, 4]), g(&[2, 4, 2])], Prim::BatchMatMul),
        case("transpose", vec![g(&[2, 3, 4])], Prim::TransposeLast2),
        case(
            "conv1d-stride2-pad1",
            vec![g(&[2, 7, 3]), g(&[3, 3, 4])],
            Prim::Conv1d { stride: 2, padding: 1 },
        ),
        case("conv1d-k2", vec![g(&[2, 5, 2]), g(&[2, 2, 3])], Prim::Conv1d { stride: 1, padding: 0 }),
        case("layer_norm", vec![g(&[2, 3, 5])], Prim::LayerNorm { eps: 1e-5 }),
        case("attention", vec![g(&[2, 3, 4]), g(&[2, 3, 4]), g(&[2, 3, 4])], Prim::Attention),
        case("add", vec![g(&[3, 4]), g(&[3, 4])], Prim::Add),
        case("sub", vec![g(&[3, 4]), g(&[3, 4])], Prim::Sub),
        case("mul", vec![g(&[3, 4]), g(&[3, 4])], Prim::Mul),
        case("add_broadcast", vec![g(&[2, 3, 4]), g(&[4])], Prim::AddBroadcast),
        case("mul_broadcast", vec![g(&[2, 3, 4]), g(&[3, 4])], Prim::MulBroadcast),
        case("affine", vec![g(&[3, 4])], Prim::Affine { scale: 1.7, shift: -0.3 }),
        case("gelu", vec![g(&[3, 4])], Prim::Gelu),
        case("mean_axis-0", vec![g(&[2, 3, 4])], Prim::MeanAxis { axis: 0 }),
        case("mean_axis-1", vec![g(&[2, 3, 4])], Prim::MeanAxis { axis: 1 }),
        case("mean_axis-2", vec![g(&[2, 3, 4])], Prim::MeanAxis { axis: 2 }),
        case("sum_all", vec![g(&[3, 4])], Prim::SumAll),
        case("mean_all", vec![g(&[3, 4])], Prim::MeanAll),
        case("reshape", vec![g(&[2, 3, 4])], Prim::Reshape { shape: vec![6, 4] }),
        case("softmax", vec![g(&[3, 5])], Prim::Softmax),
        case("log_softmax", vec![g(&[3, 5])], Prim::LogSoftmax),
        case("cosine_rows", vec![g(&[3, 4]), g(&[3, 4])], Prim::CosineRows),
        case("l2_normalize_rows", vec![g(&[3, 4])], Prim::L2NormalizeRows),
    ];
    let mut r = rng(8);
    cases.push(case("relu", vec![away_from_zero(&[3, 4], 0.05, &mut r)], Prim::Relu));
    cases.push(case("abs", vec![away_from_zero(&[3, 4], 0.05, &mut r)], Prim::Abs));
    // distinct values spaced 0.1 apart so the argmax never flips under the probe step
    let mut vals: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    cases.push(case(
        "max_axis-1",
        vec![Tensor::new(vec![2, 3, 4], vals).unwrap()],
        Prim::MaxAxis { axis: 1 },
    ));
    let mut r = rng(9);
    let labels = one_hot(&[0, 2, 1], 3).unwrap();
    cases.push(PrimCase {
        name: "cross_entropy",
        inputs: vec![Tensor::randn(&[3, 3], 1.0, &mut r)],
        f: Box::new(move |t, x| cross_entropy(t, &x[0], labels.clone())),
    });
    let target = Tensor::randn(&[3, 4], 1.0, &mut r);
    cases.push(PrimCase {
        name: "mse",
        inputs: vec![Tensor::randn(&[3, 4], 1.0, &mut r)],
        f: Box::new(move |t, x| mse(t, &x[0], target.clone())),
    });
    cases.push(PrimCase {
        name: "info_nce",
        inputs: vec![Tensor::randn(&[4, 3], 1.0, &mut r), Tensor::randn(&[4, 3], 1.0, &mut r)],
        f: Box::new(|t, x| info_nce(t, &x[0], &x[1], 0.5)),
    });
    cases.push(PrimCase {
        name: "cosine_alignment_loss",
        inputs: vec![Tensor::randn(&[2, 3, 4], 1.0, &mut r), Tensor::randn(&[2, 3, 4], 1.0, &mut r)],
        f: Box::new(|t, x| Ok(alignment_loss(t, &x[0], &x[1], AlignLoss::Cosine, false)?.0)),
    });
    cases.push(PrimCase {
        name: "mae_alignment_loss",
        inputs: vec![Tensor::randn(&[2, 3, 4], 1.0, &mut r), Tensor::randn(&[2, 3, 4], 1.0, &mut r)],
        f: Box::new(|t, x| Ok(alignment_loss(t, &x[0], &x[1], AlignLoss::Mae, false)?.0)),
    });
    cases
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every trainable
/// entry reachable through `params`, using central differences with step `eps`.
pub fn param_grad_error<S>(
    state: &mut S,
    params: impl Fn(&mut S) -> Vec<&mut Parameter>,
    on_tape: impl Fn(&S, &mut Tape) -> Result<NodeId>,
    on_eval: impl Fn(&S) -> Result<f64>,
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = on_tape(state, &mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = params(state)
        .iter()
        .map(|p| grads.param(p.id()).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape())))
        .collect();
    let mut worst = 0.0f64;
    for (pi, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = params(state)[pi].value().clone();
            let mut bumped = orig.clone();
            bumped.data_mut()[j] += eps;
            params(state)[pi].set_value(bumped.clone())?;
            let up = on_eval(state)?;
            bumped.data_mut()[j] -= 2.0 * eps;
            params(state)[pi].set_value(bumped)?;
            let down = on_eval(state)?;
            params(state)[pi].set_value(orig)?;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((a.data()[j] - numeric).abs() / a.data()[j].abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Cosine alignment between the teacher's final representation and the one
/// obtained by feeding the bridge output through the frozen suffix from layer `l`.
pub fn bridge_suffix_loss<O: Ops>(
    o: &mut O,
    bridge: &BridgeParams,
    teacher: &EncoderModel,
    h_new: &Tensor,
    target: &Tensor,
    l: usize,
) -> Result<O::Value> {
    let h = o.constant(h_new.clone());
    let b = bridge.forward(o, &h)?;
    let out = teacher.forward_suffix(o, &b, l)?;
    let t = o.constant(target.clone());
    Ok(alignment_loss(o, &out, &t, AlignLoss::Cosine, false)?.0)
}

pub fn eval_scalar(v: Result<Tensor>) -> Result<f64> {
    v.map(|t| t.item())
}

/// Gradient error of a single block for its parameters and, separately, its input.
pub fn block_grad_errors(spec: LayerSpec, input_shape: &[usize], seed: u64, eps: f64) -> Result<(f64, f64)> {
    let mut r = rng(seed);
    let mut layer = Layer::init(spec, &mut r);
    // perturb every parameter so gains and biases are not at their init values
    for p in layer.params_mut() {
        let noisy = p.value().map(|v| v + 0.1);
        let shape = noisy.shape().to_vec();
        let jitter = Tensor::randn(&shape, 0.1, &mut r);
        let v = Tensor::new(
            shape,
            noisy.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect(),
        )?;
        p.set_value(v)?;
    }
    let x = Tensor::randn(input_shape, 1.0, &mut r);
    let w_shape = layer.spec().output_shape((input_shape[1], input_shape[2]))?;
    let w = Tensor::randn(&[input_shape[0], w_shape.0, w_shape.1], 1.0, &mut r);
    let pe = param_grad_error(
        &mut layer,
        |l| l.params_mut().iter_mut().collect(),
        |l, t| {
            let xi = t.constant(x.clone());
            let y = l.forward(t, &xi)?;
            let wn = t.constant(w.clone());
            let m = t.mul(&y, &wn)?;
            t.sum_all(&m)
        },
        |l| {
            let mut e = Eval;
            let y = l.forward(&mut e, &x)?;
            let m = e.mul(&y, &w)?;
            eval_scalar(e.sum_all(&m))
        },
        eps,
    )?;
    let layer2 = layer.clone();
    let ie = modelbridge::autodiff::grad_check(
        move |t, leaves| {
            let y = layer2.forward(t, &leaves[0])?;
            let wn = t.constant(w.clone());
            let m = t.mul(&y, &wn)?;
            t.sum_all(&m)
        },
        &[x],
        eps,
    )?;
    Ok((pe, ie))
}

fn conv3(i: usize, o: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride,
        padding: 1,
    }
}

/// Two 4-layer encoders mixing every block kind.
pub fn four_layer_pair() -> (EncoderModel, EncoderModel, TaskHead) {
    let mut r = rng(11);
    let old = EncoderModel::new(
        "a",
        (16, 2),
        vec![conv3(2, 8, 1), conv3(8, 8, 2), LayerSpec::Attention { dim: 8, hidden: 16 }, LayerSpec::Norm { dim: 8 }],
        &mut r,
    )
    .unwrap();
    let new = EncoderModel::new(
        "b",
        (12, 3),
        vec![conv3(3, 6, 1), LayerSpec::Attention { dim: 6, hidden: 12 }, conv3(6, 6, 2), LayerSpec::Norm { dim: 6 }],
        &mut r,
    )
    .unwrap();
    let head = TaskHead::new(8, 3, 0.5, &mut r);
    (old, new, head)
}

fn pointwise(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 1,
        stride: 1,
        padding: 0,
    }
}

/// XOR of two sign bits. Layers 1-2 apply monotone per-channel maps, so the
/// classes stay at opposite corners of a rectangle (not linearly separable).
/// Layer 3 folds the sum around the mixed-sign value, which separates them.
/// Layer 4 zeroes everything.
pub fn planted_xor(n: usize) -> (EncoderModel, Tensor, Vec<usize>) {
    let specs = vec![pointwise(2, 2), pointwise(2, 2), pointwise(2, 2), pointwise(2, 2)];
    let mut model = EncoderModel::new("b", (1, 2), specs, &mut rng(0)).unwrap();
    let identity = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let set = |model: &mut EncoderModel, layer: usize, w: Tensor, b: Tensor| {
        let mut it = model.params_mut().skip(2 * layer);
        it.next().unwrap().set_value(w).unwrap();
        it.next().unwrap().set_value(b).unwrap();
    };
    set(&mut model, 0, identity.clone(), Tensor::zeros(&[2]));
    set(&mut model, 1, identity, Tensor::zeros(&[2]));
    let corners = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let mixed = model
        .eval_prefix(&Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap(), 2)
        .unwrap();
    let c = mixed.data()[0] + mixed.data()[1];
    let s = 20.0;
    set(
        &mut model,
        2,
        Tensor::new(vec![1, 2, 2], vec![s, -s, s, -s]).unwrap(),
        Tensor::new(vec![2], vec![-s * c, s * c]).unwrap(),
    );
    set(&mut model, 3, Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[2]));
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = corners[i % 4];
        data.extend_from_slice(&k);
        labels.push(usize::from(k[0] == k[1]));
    }
    (model, Tensor::new(vec![n, 1, 2], data).unwrap(), labels)
}


/// CKA through explicitly centered Gram matrices, `O(n²p + n³)`; for row
/// counts where the expectation form is too slow.
pub fn cka_centered(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let center = |k: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let n = k.len() as f64;
        let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n).collect();
        let grand = row.iter().sum::<f64>() / n;
        k.iter()
            .enumerate()
            .map(|(i, r)| r.iter().enumerate().map(|(j, v)| v - row[i] - row[j] + grand).collect())
            .collect()
    };
    let (k, l) = (center(gram_naive(x)), center(gram_naive(y)));
    let inner = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 { a.iter().zip(b).map(|(r, s)| dot(r, s)).sum() };
    inner(&k, &l) / (inner(&k, &k) * inner(&l, &l)).sqrt()
}

/// Rows of a `[n, ...]` tensor, flattened.
pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.len() / t.outer();
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}
