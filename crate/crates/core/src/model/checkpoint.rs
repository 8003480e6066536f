//! Binary checkpoint container.
//!
//! ```text
//! "MBRGCKPT"  u32 version  u32 header_len  header (JSON, UTF-8)
//! f64 LE parameter blocks, in the order listed by the header
//! [ "MBRGBRDG"  u32 header_len  bridge header (JSON)  A, B, P as f64 LE ]
//! ```
//! All integers are little-endian. The bridge section is optional.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeParams, BridgeShapeSpec, PoolKind};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, Layer, LayerSpec, TaskHead};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MBRGCKPT";
pub const BRIDGE_MAGIC: &[u8; 8] = b"MBRGBRDG";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadHeader {
    dim: usize,
    classes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    modality: String,
    input_shape: [usize; 2],
    layers: Vec<LayerSpec>,
    head: Option<HeadHeader>,
    blocks: Vec<Block>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BridgeHeader {
    spec: BridgeShapeSpec,
    pool: PoolKind,
    input_position: usize,
    output_position: usize,
    blocks: Vec<Block>,
}

/// A bridge together with the positions it was trained for.
#[derive(Clone, Debug)]
pub struct BridgeRecord {
    pub bridge: BridgeParams,
    pub input_position: usize,
    pub output_position: usize,
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub model: EncoderModel,
    pub head: Option<TaskHead>,
    pub bridge: Option<BridgeRecord>,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("bad header: {e}")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Format(e.to_string()))
    }
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, v: &T) {
    let text = serde_json::to_vec(v).expect("header serializes");
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
}

impl ModelCheckpoint {
    pub fn new(model: EncoderModel, head: Option<TaskHead>) -> Self {
        Self { model, head, bridge: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blocks = Vec::new();
        let mut tensors = Vec::new();
        for (i, layer) in self.model.layers().iter().enumerate() {
            for (j, p) in layer.params().iter().enumerate() {
                blocks.push(Block {
                    name: format!("layer{}.{j}", i + 1),
                    shape: p.value().shape().to_vec(),
                });
                tensors.push(p.value());
            }
        }
        if let Some(h) = &self.head {
            for (name, p) in [("head.weight", h.weight()), ("head.bias", h.bias())] {
                blocks.push(Block {
                    name: name.into(),
                    shape: p.value().shape().to_vec(),
                });
                tensors.push(p.value());
            }
        }
        let (n0, d0) = self.model.input_shape();
        let header = ModelHeader {
            modality: self.model.modality().to_string(),
            input_shape: [n0, d0],
            layers: self.model.layers().iter().map(|l| l.spec().clone()).collect(),
            head: self.head.as_ref().map(|h| HeadHeader {
                dim: h.dim(),
                classes: h.classes(),
            }),
            blocks,
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_json(&mut out, &header);
        for t in tensors {
            put_tensor(&mut out, t);
        }
        if let Some(rec) = &self.bridge {
            out.extend_from_slice(BRIDGE_MAGIC);
            let b = &rec.bridge;
            let header = BridgeHeader {
                spec: *b.spec(),
                pool: b.pool(),
                input_position: rec.input_position,
                output_position: rec.output_position,
                blocks: [("A", b.a()), ("B", b.b()), ("P", b.prototypes())]
                    .into_iter()
                    .map(|(n, p)| Block {
                        name: n.into(),
                        shape: p.value().shape().to_vec(),
                    })
                    .collect(),
            };
            put_json(&mut out, &header);
            for p in b.params() {
                put_tensor(&mut out, p.value());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header: ModelHeader = r.json()?;
        let mut blocks = header.blocks.iter();
        let mut layers = Vec::with_capacity(header.layers.len());
        for spec in header.layers {
            let count = spec.param_shapes().len();
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let b = blocks
                    .next()
                    .ok_or_else(|| Error::Format("missing parameter block".into()))?;
                values.push(r.tensor(&b.shape)?);
            }
            layers.push(Layer::from_parts(spec, values)?);
        }
        let model = EncoderModel::from_layers(
            header.modality,
            (header.input_shape[0], header.input_shape[1]),
            layers,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let head = match header.head {
            Some(hh) => {
                let mut next = || -> Result<Tensor> {
                    let b = blocks
                        .next()
                        .ok_or_else(|| Error::Format("missing head block".into()))?;
                    r.tensor(&b.shape)
                };
                let w = next()?;
                let bias = next()?;
                let head = TaskHead::from_parts(w, bias).map_err(|e| Error::Format(e.to_string()))?;
                if head.dim() != hh.dim || head.classes() != hh.classes {
                    return Err(Error::Format("head header disagrees with its blocks".into()));
                }
                Some(head)
            }
            None => None,
        };
        if blocks.next().is_some() {
            return Err(Error::Format("unused parameter blocks in header".into()));
        }
        let bridge = if r.pos == buf.len() {
            None
        } else {
            if r.take(8)? != BRIDGE_MAGIC {
                return Err(Error::Format("trailing bytes after model blocks".into()));
            }
            let h: BridgeHeader = r.json()?;
            if h.blocks.len() != 3 {
                return Err(Error::Format("bridge section needs exactly A, B, P".into()));
            }
            let a = r.tensor(&h.blocks[0].shape)?;
            let b = r.tensor(&h.blocks[1].shape)?;
            let p = r.tensor(&h.blocks[2].shape)?;
            let bridge = BridgeParams::from_parts(h.spec, h.pool, a, b, p).map_err(|e| Error::Format(e.to_string()))?;
            if r.pos != buf.len() {
                return Err(Error::Format("trailing bytes after bridge section".into()));
            }
            Some(BridgeRecord {
                bridge,
                input_position: h.input_position,
                output_position: h.output_position,
            })
        };
        Ok(Self { model, head, bridge })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{init_bridge, InitStrategy};
    use crate::model::{predict, Architecture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for arch in [Architecture::Conv, Architecture::Attention] {
            let model = EncoderModel::build(arch, "ecg", (64, 4), &mut rng).unwrap();
            let head = TaskHead::new(model.layer_shapes().last().unwrap().1, 3, 0.5, &mut rng);
            let x = Tensor::randn(&[3, 64, 4], 1.0, &mut rng);
            let before = predict(&model, &head, &x).unwrap();
            let ck = ModelCheckpoint::new(model, Some(head));
            let back = ModelCheckpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert!(back.model.is_frozen());
            assert_eq!(back.model.modality(), "ecg");
            let after = predict(&back.model, back.head.as_ref().unwrap(), &x).unwrap();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn bridge_section_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = EncoderModel::build(Architecture::Conv, "ppg", (32, 3), &mut rng).unwrap();
        let spec = BridgeShapeSpec {
            input_dim: 24,
            output_tokens: 16,
            output_dim: 16,
            rank: 4,
            prototypes: 8,
        };
        let bridge = init_bridge(spec, InitStrategy::Random, PoolKind::Max, None, 3).unwrap();
        let mut ck = ModelCheckpoint::new(model, None);
        ck.bridge = Some(BridgeRecord {
            bridge: bridge.clone(),
            input_position: 2,
            output_position: 1,
        });
        let back = ModelCheckpoint::from_bytes(&ck.to_bytes()).unwrap();
        let rec = back.bridge.unwrap();
        assert_eq!((rec.input_position, rec.output_position), (2, 1));
        assert_eq!(rec.bridge.pool(), PoolKind::Max);
        for (a, b) in rec.bridge.params().zip(bridge.params()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EncoderModel::build(Architecture::Conv, "x", (16, 2), &mut rng).unwrap();
        let bytes = ModelCheckpoint::new(model, None).to_bytes();
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.extend_from_slice(b"junk");
        assert!(ModelCheckpoint::from_bytes(&extra).is_err());
    }
}
