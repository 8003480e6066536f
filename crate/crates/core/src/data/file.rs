//! On-disk dataset container.
//!
//! ```text
//! "MBRGDATA"  u32 version  u32 header_len  header (JSON)
//! x_a  f32 LE  [n, length_a, channels_a]
//! x_b  f32 LE  [n, length_b, channels_b]
//! latents f64 LE [n, latent_dim]
//! labels u32 LE [n]   subjects u32 LE [n]
//! ```
//! Signals are generated at `f32` precision, so the round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplits, LatentTaskSpec, ModalitySpec, PairedDataset, Split, SplitMode, SplitRole};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"MBRGDATA";
pub const DATA_VERSION: u32 = 1;

/// Membership of each split, recorded so a saved dataset reloads with identical partitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub mode: SplitMode,
    pub ratios: [f64; 4],
    pub seed: u64,
    /// Subject ids per role, in `old, new, val, pair` order.
    pub subjects: [Vec<usize>; 4],
    pub indices: [Vec<usize>; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    task: LatentTaskSpec,
    mod_a: ModalitySpec,
    mod_b: ModalitySpec,
    seed: u64,
    samples: usize,
    splits: Option<SplitManifest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub dataset: PairedDataset,
    pub splits: Option<DatasetSplits>,
}

impl DatasetSplits {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            mode: self.mode,
            ratios: self.ratios,
            seed: self.seed,
            subjects: self.subject_lists.clone(),
            indices: SplitRole::ALL.map(|r| self.get(r).indices().to_vec()),
        }
    }

    pub fn from_manifest(data: &PairedDataset, m: &SplitManifest) -> Result<Self> {
        let mut seen = vec![false; data.len()];
        for list in &m.indices {
            for &i in list {
                if i >= data.len() || seen[i] {
                    return Err(Error::Format(format!("split manifest: bad or repeated index {i}")));
                }
                seen[i] = true;
            }
        }
        let [old, new, val, pair] = m.indices.clone();
        Ok(Self {
            mode: m.mode,
            ratios: m.ratios,
            seed: m.seed,
            old: Split::gather(SplitRole::Old, data, old),
            new: Split::gather(SplitRole::New, data, new),
            val: Split::gather(SplitRole::Val, data, val),
            pair: Split::gather(SplitRole::Pair, data, pair),
            subject_lists: m.subjects.clone(),
        })
    }
}

pub fn save_dataset(path: &Path, data: &PairedDataset, splits: Option<&DatasetSplits>) -> Result<()> {
    let header = Header {
        task: data.task.clone(),
        mod_a: data.mod_a.clone(),
        mod_b: data.mod_b.clone(),
        seed: data.seed,
        samples: data.len(),
        splits: splits.map(DatasetSplits::manifest),
    };
    let text = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
    for x in [&data.x_a, &data.x_b] {
        for &v in x.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &v in data.latents.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for list in [&data.labels, &data.subjects] {
        for &v in list {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated dataset at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != DATA_MAGIC {
        return Err(Error::Format(format!("{}: not a dataset file", path.display())));
    }
    let version = c.u32s(1)?[0];
    if version != DATA_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let len = c.u32s(1)?[0] as usize;
    let header: Header =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;
    header.task.validate().map_err(|e| Error::Format(e.to_string()))?;
    let n = header.samples;
    if n == 0 {
        return Err(Error::Format("dataset has no samples".into()));
    }
    let (la, ca) = header.mod_a.sample_shape();
    let (lb, cb) = header.mod_b.sample_shape();
    let k = header.task.latent_dim;
    let x_a = Tensor::new(vec![n, la, ca], c.f32s(n * la * ca)?)?;
    let x_b = Tensor::new(vec![n, lb, cb], c.f32s(n * lb * cb)?)?;
    let latents = Tensor::new(vec![n, k], c.f64s(n * k)?)?;
    let labels: Vec<usize> = c.u32s(n)?.into_iter().map(|v| v as usize).collect();
    let subjects: Vec<usize> = c.u32s(n)?.into_iter().map(|v| v as usize).collect();
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes in dataset file".into()));
    }
    if labels.iter().any(|&y| y >= header.task.classes) {
        return Err(Error::Format("label outside the class range".into()));
    }
    let dataset = PairedDataset {
        task: header.task,
        mod_a: header.mod_a,
        mod_b: header.mod_b,
        seed: header.seed,
        x_a,
        x_b,
        labels,
        subjects,
        latents,
    };
    let splits = match &header.splits {
        Some(m) => Some(DatasetSplits::from_manifest(&dataset, m)?),
        None => None,
    };
    Ok(DatasetFile { dataset, splits })
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    #[test]
    fn round_trip_with_splits() {
        let mut t = LatentTaskSpec::default();
        t.subjects = 6;
        t.samples_per_subject = 9;
        let d = generate_paired_dataset(&t, &ModalitySpec::default_old(), &ModalitySpec::default_new(), 11).unwrap();
        let s = split_dataset(&d, default_ratios(), SplitMode::Subject, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&path, &d, Some(&s)).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.dataset, d);
        assert_eq!(back.splits.unwrap(), s);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
