//! Prototype bridge: pool the new-modality tokens, generate aggregation
//! weights through a rank-`r` factorization, and mix a learnable prototype set
//! into an old-modality representation.
//!
//! ```text
//! h_m [N_m, d_m] --pool--> [d_m] --A--> [r] --B--> [N_l * N_p]
//!     --reshape--> [N_l, N_p] --P--> [N_l, d_l]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Ops, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{Prim, Tensor};

/// Gaussian init scale for A, B and randomly initialized prototypes.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeShapeSpec {
    /// Token dimension of the new-modality representation (d_m).
    pub input_dim: usize,
    /// Token count of the old-modality representation (N_l).
    pub output_tokens: usize,
    /// Token dimension of the old-modality representation (d_l).
    pub output_dim: usize,
    pub rank: usize,
    pub prototypes: usize,
}

impl BridgeShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.prototypes == 0 {
            return Err(Error::invalid("bridge rank and prototype count must be >= 1"));
        }
        if self.input_dim == 0 || self.output_tokens == 0 || self.output_dim == 0 {
            return Err(Error::invalid("bridge dimensions must be positive"));
        }
        Ok(())
    }

    /// `d_m·r + r·N_l·N_p + N_p·d_l`.
    pub fn param_count(&self) -> usize {
        self.input_dim * self.rank
            + self.rank * self.output_tokens * self.prototypes
            + self.prototypes * self.output_dim
    }

    /// Size of a dense linear map between the two flattened representations,
    /// `N_m·d_m·N_l·d_l`, for an input with `input_tokens` tokens.
    pub fn full_rank_param_count(&self, input_tokens: usize) -> u64 {
        input_tokens as u64 * self.input_dim as u64 * self.output_tokens as u64 * self.output_dim as u64
    }
}

/// Pooling over the token axis before weight generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    Random,
    /// Prototypes are token vectors drawn from old-modality representations.
    #[default]
    PrototypeFromOld,
}

/// Trainable bridge state: A `[d_m, r]`, B `[r, N_l·N_p]`, P `[N_p, d_l]`.
#[derive(Clone, Debug)]
pub struct BridgeParams {
    spec: BridgeShapeSpec,
    pool: PoolKind,
    a: Parameter,
    b: Parameter,
    p: Parameter,
}

impl BridgeParams {
    pub fn from_parts(spec: BridgeShapeSpec, pool: PoolKind, a: Tensor, b: Tensor, p: Tensor) -> Result<Self> {
        spec.validate()?;
        let expect = [
            ("A", vec![spec.input_dim, spec.rank], &a),
            ("B", vec![spec.rank, spec.output_tokens * spec.prototypes], &b),
            ("P", vec![spec.prototypes, spec.output_dim], &p),
        ];
        for (name, shape, t) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "bridge",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        let bridge = Self {
            spec,
            pool,
            a: Parameter::new(a, true),
            b: Parameter::new(b, true),
            p: Parameter::new(p, true),
        };
        assert_eq!(bridge.param_count(), spec.param_count(), "bridge parameter count identity");
        Ok(bridge)
    }

    pub fn spec(&self) -> &BridgeShapeSpec {
        &self.spec
    }

    pub fn pool(&self) -> PoolKind {
        self.pool
    }

    pub fn a(&self) -> &Parameter {
        &self.a
    }

    pub fn b(&self) -> &Parameter {
        &self.b
    }

    pub fn prototypes(&self) -> &Parameter {
        &self.p
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        [&self.a, &self.b, &self.p].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        [&mut self.a, &mut self.b, &mut self.p].into_iter()
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Parameter::len).sum()
    }

    pub fn set_a(&mut self, a: Tensor) -> Result<()> {
        self.a.set_value(a)
    }

    pub fn set_b(&mut self, b: Tensor) -> Result<()> {
        self.b.set_value(b)
    }

    pub fn set_prototypes(&mut self, p: Tensor) -> Result<()> {
        self.p.set_value(p)
    }

    /// Maps `[batch, N_m, d_m]` to `[batch, N_l, d_l]`.
    pub fn forward<O: Ops>(&self, o: &mut O, h: &O::Value) -> Result<O::Value> {
        let s = self.spec;
        let shape = o.value(h).shape().to_vec();
        if shape.len() != 3 || shape[2] != s.input_dim {
            return Err(Error::shape(
                "bridge/pool",
                format!("expected [batch, tokens, {}], got {shape:?}", s.input_dim),
            ));
        }
        let batch = shape[0];
        let pooled = match self.pool {
            PoolKind::Mean => o.mean_axis(h, 1)?,
            PoolKind::Max => o.apply(Prim::MaxAxis { axis: 1 }, &[h])?,
        };
        let a = o.param(&self.a);
        let b = o.param(&self.b);
        let p = o.param(&self.p);
        let low = o
            .matmul(&pooled, &a)
            .map_err(|e| Error::shape("bridge/low-rank-a", e.to_string()))?;
        let w = o
            .matmul(&low, &b)
            .map_err(|e| Error::shape("bridge/low-rank-b", e.to_string()))?;
        let w = o
            .reshape(&w, &[batch, s.output_tokens, s.prototypes])
            .map_err(|e| Error::shape("bridge/reshape", e.to_string()))?;
        o.matmul(&w, &p)
            .map_err(|e| Error::shape("bridge/prototypes", e.to_string()))
    }

    pub fn eval(&self, h: &Tensor) -> Result<Tensor> {
        self.forward(&mut Eval, h)
    }
}

/// Fresh bridge parameters. A and B are Gaussian with std [`INIT_STD`]; P is
/// either Gaussian or `N_p` distinct token vectors sampled from `old_reps`
/// (any tensor whose last axis is `d_l`).
pub fn init_bridge(
    spec: BridgeShapeSpec,
    strategy: InitStrategy,
    pool: PoolKind,
    old_reps: Option<&Tensor>,
    seed: u64,
) -> Result<BridgeParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::randn(&[spec.input_dim, spec.rank], INIT_STD, &mut rng);
    let b = Tensor::randn(&[spec.rank, spec.output_tokens * spec.prototypes], INIT_STD, &mut rng);
    let p = match strategy {
        InitStrategy::Random => Tensor::randn(&[spec.prototypes, spec.output_dim], INIT_STD, &mut rng),
        InitStrategy::PrototypeFromOld => {
            let reps = old_reps.ok_or_else(|| {
                Error::invalid("prototype-from-old initialization needs old-modality representations")
            })?;
            if reps.shape().last() != Some(&spec.output_dim) {
                return Err(Error::shape(
                    "init_bridge",
                    format!("token dim of {:?} is not {}", reps.shape(), spec.output_dim),
                ));
            }
            let tokens = reps.len() / spec.output_dim;
            if tokens < spec.prototypes {
                return Err(Error::invalid(format!(
                    "{tokens} old-modality tokens available, {} prototypes requested",
                    spec.prototypes
                )));
            }
            let rows = reps.reshape(&[tokens, spec.output_dim])?;
            let picks = rand::seq::index::sample(&mut rng, tokens, spec.prototypes).into_vec();
            rows.gather_outer(&picks)
        }
    };
    BridgeParams::from_parts(spec, pool, a, b, p)
}

/// One evaluated grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub rank: usize,
    pub prototypes: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_rank: usize,
    pub best_prototypes: usize,
    pub best_score: f64,
    /// Row-major over `ranks × prototype counts`.
    pub table: Vec<GridCell>,
}

/// Exhaustive search; `score` trains a bridge and returns its validation
/// metric. Ties keep the earlier cell.
pub fn grid_search<F>(ranks: &[usize], prototypes: &[usize], mut score: F) -> Result<GridResult>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    if ranks.is_empty() || prototypes.is_empty() {
        return Err(Error::invalid("grid search needs at least one rank and one prototype count"));
    }
    let mut table = Vec::with_capacity(ranks.len() * prototypes.len());
    for &r in ranks {
        for &np in prototypes {
            let s = score(r, np).map_err(|e| Error::GridCell {
                rank: r,
                prototypes: np,
                source: Box::new(e),
            })?;
            table.push(GridCell { rank: r, prototypes: np, score: s });
        }
    }
    let mut best = 0;
    for (i, c) in table.iter().enumerate() {
        if c.score > table[best].score {
            best = i;
        }
    }
    Ok(GridResult {
        best_rank: table[best].rank,
        best_prototypes: table[best].prototypes,
        best_score: table[best].score,
        table,
    })
}
