//! Linear centered kernel alignment between representation matrices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of rows kept when comparing layers.
pub const DEFAULT_ROW_CAP: usize = 512;

/// One flattened representation per row; row `i` is sample `i` of the paired set.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationMatrix {
    data: Tensor,
    layer: usize,
    modality: String,
}

impl RepresentationMatrix {
    pub fn new(data: Tensor, layer: usize, modality: impl Into<String>) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::shape("representation", format!("expected a matrix, got {:?}", data.shape())));
        }
        if data.shape()[0] < 2 {
            return Err(Error::invalid("a representation matrix needs at least 2 samples"));
        }
        Ok(Self {
            data,
            layer,
            modality: modality.into(),
        })
    }

    /// Flattens a `[samples, tokens, dim]` batch to `[samples, tokens·dim]`.
    pub fn from_batch(reps: &Tensor, layer: usize, modality: impl Into<String>) -> Result<Self> {
        let n = reps.outer();
        Self::new(reps.reshape(&[n, reps.len() / n])?, layer, modality)
    }

    pub fn rows(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.data.gather_outer(idx), self.layer, self.modality.clone())
    }
}

/// `K = H Hᵀ`.
pub fn gram(h: &RepresentationMatrix) -> Tensor {
    let (n, p) = (h.rows(), h.cols());
    let x = h.data.data();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let ri = &x[i * p..(i + 1) * p];
        for j in i..n {
            let rj = &x[j * p..(j + 1) * p];
            let v: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], k).expect("square gram")
}

fn check_square(k: &Tensor) -> Result<usize> {
    if k.rank() != 2 || k.shape()[0] != k.shape()[1] {
        return Err(Error::shape("hsic", format!("expected a square matrix, got {:?}", k.shape())));
    }
    Ok(k.shape()[0])
}

/// `H K H` with `H = I - 11ᵀ/n`.
fn double_center(k: &Tensor) -> Vec<f64> {
    let n = k.shape()[0];
    let d = k.data();
    let row: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| d[i * n + j]).sum::<f64>() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = d[i * n + j] - row[i] - col[j] + grand;
        }
    }
    out
}

/// `trace(K_t H K_s H) / n²`.
pub fn hsic(kt: &Tensor, ks: &Tensor) -> Result<f64> {
    let n = check_square(kt)?;
    if check_square(ks)? != n {
        return Err(Error::shape("hsic", format!("{:?} vs {:?}", kt.shape(), ks.shape())));
    }
    let c = double_center(kt);
    let s = ks.data();
    // trace(H Kt H Ks) = sum_ij (H Kt H)_ij (Ks)_ji
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += c[i * n + j] * s[j * n + i];
        }
    }
    Ok(acc / (n * n) as f64)
}

fn self_hsic(k: &Tensor, which: &str) -> Result<f64> {
    let v = hsic(k, k)?;
    let scale = k.norm();
    if !(v > 0.0) || v.sqrt() * k.shape()[0] as f64 <= 1e-12 * scale {
        return Err(Error::Degenerate(format!("{which} has zero centered variance")));
    }
    Ok(v)
}

/// `HSIC(A, B) / sqrt(HSIC(A, A) · HSIC(B, B))`.
pub fn cka_linear(a: &RepresentationMatrix, b: &RepresentationMatrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "cka_linear",
            format!("{} vs {} samples", a.rows(), b.rows()),
        ));
    }
    let ka = gram(a);
    let kb = gram(b);
    let haa = self_hsic(&ka, "first representation")?;
    let hbb = self_hsic(&kb, "second representation")?;
    Ok(hsic(&ka, &kb)? / (haa * hbb).sqrt())
}

/// Row indices kept by [`subsample_rows`]: all rows when `cap >= n`,
/// otherwise `cap` distinct rows in ascending order.
pub fn subsample_indices(n: usize, cap: usize, seed: u64) -> Result<Vec<usize>> {
    if cap < 2 {
        return Err(Error::invalid(format!("row cap {cap} < 2")));
    }
    if cap >= n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Deterministic row subset. Use the same `(cap, seed)` for both sides of a
/// comparison so the rows stay paired.
pub fn subsample_rows(h: &RepresentationMatrix, cap: usize, seed: u64) -> Result<RepresentationMatrix> {
    let idx = subsample_indices(h.rows(), cap, seed)?;
    h.select_rows(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(rows: &[Vec<f64>]) -> RepresentationMatrix {
        RepresentationMatrix::new(Tensor::from_rows(rows).unwrap(), 1, "t").unwrap()
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&rep(&[vec![1.0, 0.0], vec![0.0, 1.0]])), Tensor::identity(2));
        let k = gram(&rep(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        assert_eq!(k.data(), &[5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn constant_rows_annihilated() {
        let c = rep(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let other = rep(&[vec![0.3, 2.0], vec![1.0, -1.0], vec![4.0, 0.5]]);
        assert!(hsic(&gram(&c), &gram(&other)).unwrap().abs() < 1e-12);
        assert!(matches!(cka_linear(&c, &other), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(hsic(&Tensor::identity(2), &Tensor::identity(3)).is_err());
        let a = rep(&[vec![1.0], vec![2.0]]);
        let b = rep(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert!(cka_linear(&a, &b).is_err());
    }

    #[test]
    fn too_few_rows() {
        assert!(RepresentationMatrix::new(Tensor::zeros(&[1, 3]), 1, "t").is_err());
    }

    #[test]
    fn subsample_contract() {
        assert_eq!(subsample_indices(5, 10, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(subsample_indices(5, 1, 0).is_err());
        let a = subsample_indices(100, 10, 3).unwrap();
        assert_eq!(a, subsample_indices(100, 10, 3).unwrap());
        assert_eq!(a.len(), 10);
    }
}
