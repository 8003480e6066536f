//! Synthetic paired two-modality datasets and subject-disjoint splits.
//!
//! Each sample draws a latent state from its class (plus a per-subject
//! offset). Both modalities are nonlinear oscillatory observations of that
//! same latent through their own mixing matrices, frequency bands, channel
//! counts and noise, so a mapping between them exists but is not trivial.

mod file;

pub use file::{load_dataset, save_dataset, DatasetFile, SplitManifest, DATA_MAGIC, DATA_VERSION};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentTaskSpec {
    pub classes: usize,
    pub latent_dim: usize,
    /// `classes × latent_dim`.
    pub class_means: Vec<Vec<f64>>,
    /// Per-class diagonal standard deviations, `classes × latent_dim`.
    pub class_std: Vec<Vec<f64>>,
    /// Scales within-class spread and subject offsets; 0 puts every sample on its class mean.
    pub noise_level: f64,
    /// Standard deviation of the per-subject latent offset (before `noise_level`).
    pub subject_shift: f64,
    pub samples_per_subject: usize,
    pub subjects: usize,
}

impl LatentTaskSpec {
    /// Classes sit at `separation · e_c` (cycling through latent axes, with
    /// alternating sign once the axes run out) and share an isotropic spread.
    pub fn with_classes(classes: usize, latent_dim: usize, separation: f64, std: f64) -> Self {
        let class_means = (0..classes)
            .map(|c| {
                let mut m = vec![0.0; latent_dim];
                let sign = if (c / latent_dim) % 2 == 0 { 1.0 } else { -1.0 };
                m[c % latent_dim] = sign * separation;
                m
            })
            .collect();
        Self {
            classes,
            latent_dim,
            class_means,
            class_std: vec![vec![std; latent_dim]; classes],
            noise_level: 1.0,
            subject_shift: 0.3,
            samples_per_subject: 200,
            subjects: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("a task needs at least 2 classes"));
        }
        if self.latent_dim == 0 || self.samples_per_subject == 0 || self.subjects == 0 {
            return Err(Error::invalid("latent dim, subjects and samples per subject must be positive"));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::invalid("noise level must be finite and >= 0"));
        }
        if !(self.subject_shift >= 0.0) || !self.subject_shift.is_finite() {
            return Err(Error::invalid("subject shift must be finite and >= 0"));
        }
        let rows_ok = |m: &Vec<Vec<f64>>| m.len() == self.classes && m.iter().all(|r| r.len() == self.latent_dim);
        if !rows_ok(&self.class_means) || !rows_ok(&self.class_std) {
            return Err(Error::invalid("class means/std must be classes × latent_dim"));
        }
        if self
            .class_std
            .iter()
            .flatten()
            .any(|s| !(*s > 0.0) || !s.is_finite())
        {
            return Err(Error::Degenerate("class covariance must be positive definite".into()));
        }
        Ok(())
    }
}

impl Default for LatentTaskSpec {
    fn default() -> Self {
        Self::with_classes(3, 4, 2.0, 0.5)
    }
}

/// How one modality observes the latent state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
    pub length: usize,
    /// Oscillator frequencies, in cycles per window, are spread over this band.
    pub band: (f64, f64),
    pub noise: f64,
    pub mixing_seed: u64,
}

impl ModalitySpec {
    pub fn default_old() -> Self {
        Self {
            name: "ecg".into(),
            channels: 4,
            length: 64,
            band: (2.0, 9.0),
            noise: 0.15,
            mixing_seed: 101,
        }
    }

    pub fn default_new() -> Self {
        Self {
            name: "ppg".into(),
            channels: 3,
            length: 32,
            band: (1.0, 5.0),
            noise: 0.15,
            mixing_seed: 202,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 {
            return Err(Error::invalid(format!("modality {}: channels and length must be positive", self.name)));
        }
        if !(self.noise >= 0.0) || !self.band.0.is_finite() || !self.band.1.is_finite() {
            return Err(Error::invalid(format!("modality {}: bad noise or band", self.name)));
        }
        Ok(())
    }

    /// `[length, channels]` of one sample.
    pub fn sample_shape(&self) -> (usize, usize) {
        (self.length, self.channels)
    }
}

/// Fixed per-modality observation parameters derived from the mixing seed.
struct Observation {
    oscill: Vec<f64>, // channels × latent_dim
    direct: Vec<f64>, // channels × latent_dim
    freqs: Vec<f64>,
}

impl Observation {
    fn new(spec: &ModalitySpec, latent_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.mixing_seed);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..spec.channels * latent_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect()
        };
        let oscill = draw(&mut rng);
        let direct = draw(&mut rng);
        let freqs = (0..latent_dim)
            .map(|j| {
                if latent_dim == 1 {
                    spec.band.0
                } else {
                    spec.band.0 + (spec.band.1 - spec.band.0) * j as f64 / (latent_dim - 1) as f64
                }
            })
            .collect();
        Self { oscill, direct, freqs }
    }

    /// One `[length, channels]` signal, rounded to `f32` precision so that the
    /// on-disk format reproduces it exactly.
    fn render(&self, spec: &ModalitySpec, latent: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = latent.len();
        let amp: Vec<f64> = latent.iter().map(|&z| softplus(z)).collect();
        let phase: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        let mut out = Vec::with_capacity(spec.length * spec.channels);
        for t in 0..spec.length {
            let tt = t as f64 / spec.length as f64;
            for c in 0..spec.channels {
                let mut osc = 0.0;
                let mut dc = 0.0;
                for j in 0..k {
                    osc += self.oscill[c * k + j] * amp[j] * (2.0 * PI * self.freqs[j] * tt + phase[j]).sin();
                    dc += self.direct[c * k + j] * latent[j];
                }
                let eps: f64 = StandardNormal.sample(rng);
                let v = (0.8 * osc + 0.4 * dc).tanh() + spec.noise * eps;
                out.push(v as f32 as f64);
            }
        }
        out
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Synchronized samples of two modalities with labels, subjects and the latent
/// states they were rendered from. Modality `a` plays the old (teacher) role.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub task: LatentTaskSpec,
    pub mod_a: ModalitySpec,
    pub mod_b: ModalitySpec,
    pub seed: u64,
    pub x_a: Tensor,
    pub x_b: Tensor,
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    pub latents: Tensor,
}

const STREAM_SUBJECT: u64 = 1 << 48;

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_paired_dataset(
    task: &LatentTaskSpec,
    mod_a: &ModalitySpec,
    mod_b: &ModalitySpec,
    seed: u64,
) -> Result<PairedDataset> {
    task.validate()?;
    mod_a.validate()?;
    mod_b.validate()?;
    let k = task.latent_dim;
    let obs_a = Observation::new(mod_a, k);
    let obs_b = Observation::new(mod_b, k);
    let n = task.subjects * task.samples_per_subject;
    let mut xa = Vec::with_capacity(n * mod_a.length * mod_a.channels);
    let mut xb = Vec::with_capacity(n * mod_b.length * mod_b.channels);
    let mut labels = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n * k);
    for s in 0..task.subjects {
        let mut srng = sample_rng(seed, STREAM_SUBJECT + s as u64);
        let offset: Vec<f64> = (0..k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut srng);
                z * task.subject_shift
            })
            .collect();
        for j in 0..task.samples_per_subject {
            let i = s * task.samples_per_subject + j;
            let y = j % task.classes;
            let mut lrng = sample_rng(seed, 3 * i as u64);
            let z: Vec<f64> = (0..k)
                .map(|d| {
                    let e: f64 = StandardNormal.sample(&mut lrng);
                    task.class_means[y][d] + task.noise_level * (offset[d] + task.class_std[y][d] * e)
                })
                .collect();
            xa.extend(obs_a.render(mod_a, &z, &mut sample_rng(seed, 3 * i as u64 + 1)));
            xb.extend(obs_b.render(mod_b, &z, &mut sample_rng(seed, 3 * i as u64 + 2)));
            labels.push(y);
            subjects.push(s);
            latents.extend(z);
        }
    }
    Ok(PairedDataset {
        task: task.clone(),
        mod_a: mod_a.clone(),
        mod_b: mod_b.clone(),
        seed,
        x_a: Tensor::new(vec![n, mod_a.length, mod_a.channels], xa)?,
        x_b: Tensor::new(vec![n, mod_b.length, mod_b.channels], xb)?,
        labels,
        subjects,
        latents: Tensor::new(vec![n, k], latents)?,
    })
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Re-renders sample `i` from its stored latent state and the dataset seed.
    pub fn regenerate_sample(&self, i: usize) -> Result<(Tensor, Tensor)> {
        if i >= self.len() {
            return Err(Error::invalid(format!("sample {i} out of range")));
        }
        let k = self.task.latent_dim;
        let z = &self.latents.data()[i * k..(i + 1) * k];
        let a = Observation::new(&self.mod_a, k).render(&self.mod_a, z, &mut sample_rng(self.seed, 3 * i as u64 + 1));
        let b = Observation::new(&self.mod_b, k).render(&self.mod_b, z, &mut sample_rng(self.seed, 3 * i as u64 + 2));
        Ok((
            Tensor::new(vec![self.mod_a.length, self.mod_a.channels], a)?,
            Tensor::new(vec![self.mod_b.length, self.mod_b.channels], b)?,
        ))
    }
}

/// The four partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    /// Labeled old-modality data for the teacher.
    Old,
    /// Held-out test set; labels only for final evaluation.
    New,
    /// Hyperparameter selection; labels only for metric computation.
    Val,
    /// Unlabeled synchronized pairs for transfer training.
    Pair,
}

impl SplitRole {
    pub const ALL: [SplitRole; 4] = [SplitRole::Old, SplitRole::New, SplitRole::Val, SplitRole::Pair];

    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Old => "old",
            SplitRole::New => "new",
            SplitRole::Val => "val",
            SplitRole::Pair => "pair",
        }
    }
}

/// Why a caller wants labels; checked against the split's role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelUse {
    Training,
    Evaluation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Subject-disjoint partitions.
    #[default]
    Subject,
    /// Samples partitioned directly, ignoring subjects.
    Sample,
}

/// Default partition: 33 : 22 : 11 : 33 for old, new, val, pair, normalized to sum to 1.
pub fn default_ratios() -> [f64; 4] {
    [33.0 / 99.0, 22.0 / 99.0, 11.0 / 99.0, 33.0 / 99.0]
}

/// Largest-remainder apportionment of `total` items by `ratios`. Ties in the
/// fractional part go to the earlier entry.
pub fn apportion(total: usize, ratios: &[f64]) -> Vec<usize> {
    let sum: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| r / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    role: SplitRole,
    indices: Vec<usize>,
    x_a: Option<Tensor>,
    x_b: Option<Tensor>,
    labels: Vec<usize>,
    subjects: Vec<usize>,
}

impl Split {
    fn gather(role: SplitRole, data: &PairedDataset, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        let (x_a, x_b) = if indices.is_empty() {
            (None, None)
        } else {
            (Some(data.x_a.gather_outer(&indices)), Some(data.x_b.gather_outer(&indices)))
        };
        Self {
            role,
            labels: indices.iter().map(|&i| data.labels[i]).collect(),
            subjects: indices.iter().map(|&i| data.subjects[i]).collect(),
            indices,
            x_a,
            x_b,
        }
    }

    pub fn role(&self) -> SplitRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Positions of the members in the full dataset, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn subjects(&self) -> &[usize] {
        &self.subjects
    }

    /// Old-modality signals `[n, length, channels]`.
    pub fn x_a(&self) -> Result<&Tensor> {
        self.x_a
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("split `{}` is empty", self.role.name())))
    }

    /// New-modality signals.
    pub fn x_b(&self) -> Result<&Tensor> {
        self.x_b
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("split `{}` is empty", self.role.name())))
    }

    /// Labels, subject to the split's access rule: the old split is fully
    /// labeled, new and val labels serve evaluation only, and pair labels are
    /// never released.
    pub fn labels(&self, purpose: LabelUse) -> Result<&[usize]> {
        let allowed = match (self.role, purpose) {
            (SplitRole::Old, _) => true,
            (SplitRole::New | SplitRole::Val, LabelUse::Evaluation) => true,
            _ => false,
        };
        if !allowed {
            return Err(Error::LabelAccess(format!(
                "{purpose:?} access to `{}` labels",
                self.role.name()
            )));
        }
        Ok(&self.labels)
    }

    #[cfg(test)]
    pub(crate) fn labels_unchecked(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub mode: SplitMode,
    pub ratios: [f64; 4],
    pub seed: u64,
    pub old: Split,
    pub new: Split,
    pub val: Split,
    pub pair: Split,
    /// Subject ids per role, ascending (empty lists in sample mode).
    pub subject_lists: [Vec<usize>; 4],
}

impl DatasetSplits {
    pub fn get(&self, role: SplitRole) -> &Split {
        match role {
            SplitRole::Old => &self.old,
            SplitRole::New => &self.new,
            SplitRole::Val => &self.val,
            SplitRole::Pair => &self.pair,
        }
    }
}

pub fn split_dataset(data: &PairedDataset, ratios: [f64; 4], mode: SplitMode, seed: u64) -> Result<DatasetSplits> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: [Vec<usize>; 4] = Default::default();
    let mut subject_lists: [Vec<usize>; 4] = Default::default();
    match mode {
        SplitMode::Subject => {
            let mut ids: Vec<usize> = data.subjects.clone();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() < 4 {
                return Err(Error::invalid(format!("{} subjects cannot populate 4 splits", ids.len())));
            }
            ids.shuffle(&mut rng);
            let counts = apportion(ids.len(), &ratios);
            let mut start = 0;
            for (r, &c) in counts.iter().enumerate() {
                if c == 0 && ratios[r] > 0.0 {
                    return Err(Error::invalid(format!(
                        "too few subjects: split `{}` would be empty",
                        SplitRole::ALL[r].name()
                    )));
                }
                let mut chosen = ids[start..start + c].to_vec();
                chosen.sort_unstable();
                start += c;
                members[r] = (0..data.len()).filter(|&i| chosen.binary_search(&data.subjects[i]).is_ok()).collect();
                subject_lists[r] = chosen;
            }
        }
        SplitMode::Sample => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let counts = apportion(idx.len(), &ratios);
            let mut start = 0;
            for (r, &c) in counts.iter().enumerate() {
                if c == 0 && ratios[r] > 0.0 {
                    return Err(Error::invalid(format!(
                        "too few samples: split `{}` would be empty",
                        SplitRole::ALL[r].name()
                    )));
                }
                members[r] = idx[start..start + c].to_vec();
                start += c;
            }
        }
    }
    let [old, new, val, pair] = members;
    let splits = DatasetSplits {
        mode,
        ratios,
        seed,
        old: Split::gather(SplitRole::Old, data, old),
        new: Split::gather(SplitRole::New, data, new),
        val: Split::gather(SplitRole::Val, data, val),
        pair: Split::gather(SplitRole::Pair, data, pair),
        subject_lists,
    };
    assert_disjoint(&splits, data.len());
    Ok(splits)
}

fn assert_disjoint(s: &DatasetSplits, n: usize) {
    let mut seen = vec![false; n];
    for role in SplitRole::ALL {
        for &i in s.get(role).indices() {
            assert!(!seen[i], "sample {i} in two splits");
            seen[i] = true;
        }
    }
    if s.mode == SplitMode::Subject {
        for a in 0..4 {
            for b in a + 1..4 {
                assert!(
                    s.subject_lists[a].iter().all(|x| !s.subject_lists[b].contains(x)),
                    "subject shared between splits"
                );
            }
        }
    }
}

/// Keeps `⌈fraction·|pair|⌉` uniformly chosen pair samples; other splits are untouched.
pub fn subsample_pair_fraction(
    splits: &DatasetSplits,
    data: &PairedDataset,
    fraction: f64,
    seed: u64,
) -> Result<DatasetSplits> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("pair fraction {fraction} outside (0, 1]")));
    }
    let n = splits.pair.len();
    let keep = (fraction * n as f64 - 1e-9).ceil() as usize;
    if keep == 0 {
        return Err(Error::invalid("pair fraction leaves no samples"));
    }
    let mut out = splits.clone();
    if keep < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, n, keep).into_vec();
        let members = picks.iter().map(|&p| splits.pair.indices[p]).collect();
        out.pair = Split::gather(SplitRole::Pair, data, members);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (LatentTaskSpec, ModalitySpec, ModalitySpec) {
        let mut t = LatentTaskSpec::default();
        t.subjects = 6;
        t.samples_per_subject = 12;
        (t, ModalitySpec::default_old(), ModalitySpec::default_new())
    }

    #[test]
    fn same_seed_same_bytes() {
        let (t, a, b) = small();
        let d1 = generate_paired_dataset(&t, &a, &b, 4).unwrap();
        let d2 = generate_paired_dataset(&t, &a, &b, 4).unwrap();
        assert_eq!(d1, d2);
        let d3 = generate_paired_dataset(&t, &a, &b, 5).unwrap();
        assert_ne!(d1.x_a, d3.x_a);
    }

    #[test]
    fn pairing_integrity() {
        let (t, a, b) = small();
        let d = generate_paired_dataset(&t, &a, &b, 9).unwrap();
        for i in [0, 7, d.len() - 1] {
            let (xa, xb) = d.regenerate_sample(i).unwrap();
            assert_eq!(xa.data(), d.x_a.index_outer(i).data());
            assert_eq!(xb.data(), d.x_b.index_outer(i).data());
        }
    }

    #[test]
    fn zero_noise_latents_sit_on_means() {
        let (mut t, a, b) = small();
        t.noise_level = 0.0;
        let d = generate_paired_dataset(&t, &a, &b, 1).unwrap();
        for (i, &y) in d.labels.iter().enumerate() {
            let z = &d.latents.data()[i * 4..(i + 1) * 4];
            assert_eq!(z, t.class_means[y].as_slice());
        }
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let (mut t, a, b) = small();
        t.class_std[1][2] = 0.0;
        assert!(matches!(generate_paired_dataset(&t, &a, &b, 0), Err(Error::Degenerate(_))));
        t.class_std[1][2] = 1.0;
        t.classes = 1;
        assert!(generate_paired_dataset(&t, &a, &b, 0).is_err());
    }

    #[test]
    fn largest_remainder_fifteen_subjects() {
        assert_eq!(apportion(15, &[0.33, 0.22, 0.11, 0.33]), vec![5, 3, 2, 5]);
        assert_eq!(apportion(15, &default_ratios()), vec![5, 3, 2, 5]);
        assert_eq!(apportion(7, &[1.0, 0.0, 0.0, 0.0]), vec![7, 0, 0, 0]);
    }

    #[test]
    fn subject_split_partition() {
        let (t, a, b) = small();
        let d = generate_paired_dataset(&t, &a, &b, 2).unwrap();
        let s = split_dataset(&d, default_ratios(), SplitMode::Subject, 3).unwrap();
        let mut all: Vec<usize> = s.subject_lists.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        let total: usize = SplitRole::ALL.iter().map(|&r| s.get(r).len()).sum();
        assert_eq!(total, d.len());
        for role in SplitRole::ALL {
            let split = s.get(role);
            assert!(split.subjects().iter().all(|x| s.subject_lists[role as usize].contains(x)));
        }
    }

    #[test]
    fn everything_to_old() {
        let (t, a, b) = small();
        let d = generate_paired_dataset(&t, &a, &b, 2).unwrap();
        let s = split_dataset(&d, [1.0, 0.0, 0.0, 0.0], SplitMode::Subject, 0).unwrap();
        assert_eq!(s.old.len(), d.len());
        assert!(s.pair.is_empty());
        assert!(s.pair.x_b().is_err());
    }

    #[test]
    fn split_errors() {
        let (mut t, a, b) = small();
        t.subjects = 3;
        let d = generate_paired_dataset(&t, &a, &b, 2).unwrap();
        assert!(split_dataset(&d, default_ratios(), SplitMode::Subject, 0).is_err());
        assert!(split_dataset(&d, [0.5, 0.2, 0.1, 0.1], SplitMode::Sample, 0).is_err());
        let ok = split_dataset(&d, default_ratios(), SplitMode::Sample, 0).unwrap();
        assert_eq!(ok.old.len() + ok.new.len() + ok.val.len() + ok.pair.len(), d.len());
    }

    #[test]
    fn label_access_rules() {
        let (t, a, b) = small();
        let d = generate_paired_dataset(&t, &a, &b, 2).unwrap();
        let s = split_dataset(&d, default_ratios(), SplitMode::Subject, 0).unwrap();
        assert!(s.old.labels(LabelUse::Training).is_ok());
        assert!(s.new.labels(LabelUse::Evaluation).is_ok());
        assert!(matches!(s.new.labels(LabelUse::Training), Err(Error::LabelAccess(_))));
        assert!(s.val.labels(LabelUse::Training).is_err());
        assert!(s.pair.labels(LabelUse::Training).is_err());
        assert!(s.pair.labels(LabelUse::Evaluation).is_err());
        assert_eq!(s.pair.labels_unchecked().len(), s.pair.len());
    }

    #[test]
    fn pair_fraction() {
        let (mut t, a, b) = small();
        t.samples_per_subject = 100;
        t.subjects = 30;
        let d = generate_paired_dataset(&t, &a, &b, 2).unwrap();
        let s = split_dataset(&d, default_ratios(), SplitMode::Subject, 0).unwrap();
        assert_eq!(s.pair.len(), 1000);
        assert_eq!(subsample_pair_fraction(&s, &d, 1.0, 0).unwrap(), s);
        let r = subsample_pair_fraction(&s, &d, 0.2, 0).unwrap();
        assert_eq!(r.pair.len(), 200);
        assert_eq!(r.old, s.old);
        assert!(r.pair.indices().iter().all(|i| s.pair.indices().contains(i)));
        assert!(subsample_pair_fraction(&s, &d, 0.0, 0).is_err());
        assert!(subsample_pair_fraction(&s, &d, 1e-6, 0).is_ok());
    }

    #[test]
    fn label_balance_per_split() {
        let t = LatentTaskSpec::default();
        let d = generate_paired_dataset(&t, &ModalitySpec::default_old(), &ModalitySpec::default_new(), 0).unwrap();
        let s = split_dataset(&d, default_ratios(), SplitMode::Subject, 0).unwrap();
        assert_eq!(s.subject_lists.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 3, 2, 5]);
        for role in SplitRole::ALL {
            let split = s.get(role);
            let labels = split.labels_unchecked();
            for c in 0..3 {
                let share = labels.iter().filter(|&&y| y == c).count() as f64 / labels.len() as f64;
                assert!((share - 1.0 / 3.0).abs() < 0.1 / 3.0, "{role:?} class {c}: {share}");
            }
        }
    }
}
