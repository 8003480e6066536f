//! Linear probes on intermediate representations, used to choose where the
//! new-modality encoder is tapped.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Ops};
use crate::error::{Error, Result};
use crate::metrics::f1_scores_with;
use crate::model::{argmax_rows, batched, predict, EncoderModel, TaskHead};
use crate::tensor::Tensor;

/// Teacher predictions on old-modality inputs; they stand in for labels of the paired samples.
pub fn pseudo_labels(teacher: &EncoderModel, head: &TaskHead, x_old: &Tensor) -> Result<Vec<usize>> {
    let probs = batched(x_old, 256, |b| predict(teacher, head, b))?;
    Ok(argmax_rows(&probs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// L2 penalty on all probe coefficients, bias included.
    pub l2: f64,
    pub folds: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            folds: 5,
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[p + 1, classes]`; the last row is the bias.
    coef: Vec<f64>,
    classes: usize,
    pub iterations: usize,
}

fn standardize_stats(x: &[f64], n: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; p];
    for row in x.chunks(p) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; p];
    for row in x.chunks(p) {
        for j in 0..p {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Penalized mean cross-entropy and its gradient.
fn objective(z: &[f64], y: &[usize], n: usize, p: usize, c: usize, l2: f64, w: &[f64], g: &mut [f64]) -> f64 {
    g.iter_mut().for_each(|v| *v = 0.0);
    let mut loss = 0.0;
    let mut logits = vec![0.0; c];
    for i in 0..n {
        let row = &z[i * p..(i + 1) * p];
        for k in 0..c {
            let mut s = w[p * c + k];
            for j in 0..p {
                s += row[j] * w[j * c + k];
            }
            logits[k] = s;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - logits[y[i]];
        for k in 0..c {
            let d = (logits[k] - lse).exp() - if k == y[i] { 1.0 } else { 0.0 };
            for j in 0..p {
                g[j * c + k] += d * row[j];
            }
            g[p * c + k] += d;
        }
    }
    let inv = 1.0 / n as f64;
    let mut pen = 0.0;
    for (gv, wv) in g.iter_mut().zip(w) {
        *gv = *gv * inv + l2 * wv;
        pen += wv * wv;
    }
    loss * inv + 0.5 * l2 * pen
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LogisticProbe {
    /// Fits with L-BFGS (memory 10, backtracking Armijo line search) until the
    /// gradient norm drops below `tol` or `max_iter` iterations pass.
    pub fn fit(x: &Tensor, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::shape("probe", format!("expected [n, p] features, got {:?}", x.shape())));
        }
        let (n, p) = (x.shape()[0], x.shape()[1]);
        if y.len() != n {
            return Err(Error::invalid(format!("{n} feature rows vs {} labels", y.len())));
        }
        if y.iter().any(|&v| v >= classes) {
            return Err(Error::invalid("probe label outside the class range"));
        }
        let (mean, scale) = standardize_stats(x.data(), n, p);
        let z: Vec<f64> = x
            .data()
            .chunks(p)
            .flat_map(|row| (0..p).map(|j| (row[j] - mean[j]) / scale[j]).collect::<Vec<_>>())
            .collect();
        let dim = (p + 1) * classes;
        let mut w = vec![0.0; dim];
        let mut g = vec![0.0; dim];
        let mut f = objective(&z, y, n, p, classes, cfg.l2, &w, &mut g);
        let mut hist_s: Vec<Vec<f64>> = Vec::new();
        let mut hist_y: Vec<Vec<f64>> = Vec::new();
        let mut iterations = 0;
        let mut g_new = vec![0.0; dim];
        while iterations < cfg.max_iter && dot(&g, &g).sqrt() >= cfg.tol {
            iterations += 1;
            // two-loop recursion
            let mut q = g.clone();
            let mut alpha = vec![0.0; hist_s.len()];
            for i in (0..hist_s.len()).rev() {
                let rho = 1.0 / dot(&hist_y[i], &hist_s[i]);
                alpha[i] = rho * dot(&hist_s[i], &q);
                q.iter_mut().zip(&hist_y[i]).for_each(|(a, b)| *a -= alpha[i] * b);
            }
            if let (Some(s), Some(yv)) = (hist_s.last(), hist_y.last()) {
                let gamma = dot(s, yv) / dot(yv, yv);
                q.iter_mut().for_each(|v| *v *= gamma);
            }
            for i in 0..hist_s.len() {
                let rho = 1.0 / dot(&hist_y[i], &hist_s[i]);
                let beta = rho * dot(&hist_y[i], &q);
                q.iter_mut().zip(&hist_s[i]).for_each(|(a, b)| *a += (alpha[i] - beta) * b);
            }
            let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
            let mut slope = dot(&g, &dir);
            if slope >= 0.0 {
                dir = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
                hist_s.clear();
                hist_y.clear();
            }
            let mut step = if hist_s.is_empty() { 1.0 / dot(&g, &g).sqrt().max(1.0) } else { 1.0 };
            let mut accepted = None;
            for _ in 0..40 {
                let cand: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
                let fc = objective(&z, y, n, p, classes, cfg.l2, &cand, &mut g_new);
                if fc <= f + 1e-4 * step * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, fc)) = accepted else { break };
            let s: Vec<f64> = cand.iter().zip(&w).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            if dot(&s, &yv) > 1e-12 {
                hist_s.push(s);
                hist_y.push(yv);
                if hist_s.len() > 10 {
                    hist_s.remove(0);
                    hist_y.remove(0);
                }
            }
            w = cand;
            f = fc;
            std::mem::swap(&mut g, &mut g_new);
        }
        Ok(Self {
            mean,
            scale,
            coef: w,
            classes,
            iterations,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.mean.len();
        if x.rank() != 2 || x.shape()[1] != p {
            return Err(Error::shape("probe", format!("expected [n, {p}], got {:?}", x.shape())));
        }
        let c = self.classes;
        Ok(x
            .data()
            .chunks(p)
            .map(|row| {
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..c {
                    let mut s = self.coef[p * c + k];
                    for j in 0..p {
                        s += (row[j] - self.mean[j]) / self.scale[j] * self.coef[j * c + k];
                    }
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                best.0
            })
            .collect())
    }
}

/// Mean held-out macro-F1 over `folds` contiguous folds of a seeded shuffle.
pub fn cross_val_f1_macro(x: &Tensor, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<f64> {
    let n = x.outer();
    if cfg.folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if n < cfg.folds {
        return Err(Error::invalid(format!("{n} samples cannot fill {} folds", cfg.folds)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut total = 0.0;
    for k in 0..cfg.folds {
        let lo = k * n / cfg.folds;
        let hi = (k + 1) * n / cfg.folds;
        let test: Vec<usize> = order[lo..hi].to_vec();
        let train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let yte: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        let probe = LogisticProbe::fit(&x.gather_outer(&train), &ytr, classes, cfg)?;
        let pred = probe.predict(&x.gather_outer(&test))?;
        total += f1_scores_with(&yte, &pred, classes)?.macro_f1;
    }
    Ok(total / cfg.folds as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputPositionChoice {
    pub position: usize,
    /// Cross-validated macro-F1 for `m = 1..=M`; empty when probing was skipped.
    pub scores: Vec<f64>,
    pub warning: Option<String>,
}

/// Picks the layer `m` of the new-modality encoder whose mean-pooled output is
/// most linearly predictive of the pseudo-labels. Ties go to the smallest `m`.
pub fn select_input_position(
    model: &EncoderModel,
    x_new: &Tensor,
    pseudo: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<InputPositionChoice> {
    if x_new.outer() != pseudo.len() {
        return Err(Error::invalid(format!(
            "{} paired samples vs {} pseudo-labels",
            x_new.outer(),
            pseudo.len()
        )));
    }
    let depth = model.layer_count();
    let mut distinct = pseudo.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(InputPositionChoice {
            position: depth,
            scores: Vec::new(),
            warning: Some(format!(
                "pseudo-labels contain a single class; using the final layer m = {depth}"
            )),
        });
    }
    let reps = model.forward_all(x_new)?;
    let mut scores = Vec::with_capacity(depth);
    for h in &reps {
        let mut e = Eval;
        let pooled = e.mean_axis(h, 1)?;
        scores.push(cross_val_f1_macro(&pooled, pseudo, classes, cfg)?);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(InputPositionChoice {
        position: best + 1,
        scores,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::Rng;

    fn blobs(n: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Tensor::from_fn(&[n, 2], |k| {
            let (i, j) = (k / 2, k % 2);
            let centre = if j == y[i] % 2 && y[i] > 0 { sep } else { 0.0 } * if y[i] == 2 { -1.0 } else { 1.0 };
            centre + rng.random::<f64>() - 0.5
        });
        (x, y)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(90, 5.0, 1);
        let probe = LogisticProbe::fit(&x, &y, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(probe.predict(&x).unwrap(), y);
        let f1 = cross_val_f1_macro(&x, &y, 3, &ProbeConfig::default()).unwrap();
        assert!(f1 > 0.95, "{f1}");
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (x, y) = blobs(12, 1.0, 2);
        let (p, c) = (2, 3);
        let w: Vec<f64> = (0..(p + 1) * c).map(|i| 0.1 * i as f64 - 0.3).collect();
        let mut g = vec![0.0; w.len()];
        objective(x.data(), &y, 12, p, c, 0.1, &w, &mut g);
        let mut scratch = g.clone();
        for i in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += 1e-6;
            wm[i] -= 1e-6;
            let fd = (objective(x.data(), &y, 12, p, c, 0.1, &wp, &mut scratch)
                - objective(x.data(), &y, 12, p, c, 0.1, &wm, &mut scratch))
                / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn fold_count_errors() {
        let (x, y) = blobs(4, 1.0, 3);
        let cfg = ProbeConfig::default();
        assert!(cross_val_f1_macro(&x, &y, 3, &cfg).is_err());
    }

    #[test]
    fn single_class_falls_back_to_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = EncoderModel::build(Architecture::Conv, "ppg", (32, 3), &mut rng).unwrap();
        let x = Tensor::randn(&[10, 32, 3], 1.0, &mut rng);
        let c = select_input_position(&m, &x, &[1; 10], 3, &ProbeConfig::default()).unwrap();
        assert_eq!(c.position, m.layer_count());
        assert!(c.warning.is_some());
    }
}
