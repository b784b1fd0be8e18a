//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MGRW" | version u16 | meta_len u32 | meta (JSON, UTF-8) | count u32
//! per tensor: name_len u32 | name | order u32 | dims u32 × order
//!             | dtype u8 (0 = f32, 1 = f64) | payload
//! ```
//!
//! The payload is exactly `product(dims) × dtype size` bytes of IEEE-754.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::{LigoOperator, MangoCores};
use crate::packing::slab_table_hash;
use crate::tensor::{DType, Tensor};
use crate::training::TrainedOperator;
use crate::transformer::{ModelConfig, ModelWeights};

pub const MAGIC: &[u8; 4] = b"MGRW";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    MangoCores,
    LigoOperator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub ranks: Option<[usize; 4]>,
    pub slab_hash: String,
    pub seed: u64,
    /// Operator-warmup FLOPs already spent producing these weights.
    #[serde(default)]
    pub warmup_flops: u64,
    /// Free-form provenance, e.g. the method that produced the weights.
    #[serde(default)]
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| fmt_err(format!("{what} too large for the format")))
}

impl Checkpoint {
    pub fn from_model(w: &ModelWeights, cfg: &ModelConfig, seed: u64, note: impl Into<String>) -> Result<Self> {
        w.check_shapes(cfg)?;
        Ok(Self {
            meta: CheckpointMeta {
                kind: CheckpointKind::Model,
                model: Some(cfg.clone()),
                ranks: None,
                slab_hash: slab_table_hash(cfg.ffn_ratio),
                seed,
                warmup_flops: 0,
                note: note.into(),
            },
            tensors: w.named().into_iter().map(|(n, t)| (n, t.to_dtype(cfg.dtype))).collect(),
        })
    }

    /// Operator cores are always stored in f64.
    pub fn from_operator(op: &TrainedOperator, ffn_ratio: usize, seed: u64) -> Self {
        let (kind, ranks) = match op {
            TrainedOperator::Mango(c) => (CheckpointKind::MangoCores, Some(c.ranks())),
            TrainedOperator::Ligo(_) => (CheckpointKind::LigoOperator, None),
        };
        Self {
            meta: CheckpointMeta {
                kind,
                model: None,
                ranks,
                slab_hash: slab_table_hash(ffn_ratio),
                seed,
                warmup_flops: 0,
                note: op.as_dyn().name().to_string(),
            },
            tensors: op
                .as_dyn()
                .params()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.to_dtype(DType::F64)))
                .collect(),
        }
    }

    fn table(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    fn expect(&self, kind: CheckpointKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(fmt_err(format!("expected a {kind:?} checkpoint, found {:?}", self.meta.kind)));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<(ModelConfig, ModelWeights)> {
        self.expect(CheckpointKind::Model)?;
        let cfg = self.meta.model.clone().ok_or_else(|| fmt_err("model checkpoint without a config"))?;
        cfg.validate()?;
        if self.meta.slab_hash != slab_table_hash(cfg.ffn_ratio) {
            return Err(fmt_err("slab-order table hash does not match this build"));
        }
        let w = ModelWeights::from_named(&cfg, self.table())?;
        Ok((cfg, w))
    }

    pub fn to_operator(&self) -> Result<TrainedOperator> {
        let mut t = self.table();
        let mut get = |n: &str| t.remove(n).ok_or_else(|| fmt_err(format!("missing tensor {n}")));
        match self.meta.kind {
            CheckpointKind::MangoCores => Ok(TrainedOperator::Mango(MangoCores::new(
                get("S_B")?,
                get("S_O")?,
                get("S_L")?,
                get("S_I")?,
            )?)),
            CheckpointKind::LigoOperator => Ok(TrainedOperator::Ligo(LigoOperator::new(
                get("S_I")?,
                get("S_O")?,
                get("S_L")?,
            )?)),
            CheckpointKind::Model => Err(fmt_err("model checkpoint holds no operator")),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len(), "name")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.order(), "order")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            out.push(dtype_tag(t.dtype()));
            match t.dtype() {
                DType::F32 => {
                    for &v in t.data() {
                        let f = v as f32;
                        if f as f64 != v && !v.is_nan() {
                            return Err(fmt_err(format!("{name} is tagged f32 but holds {v}")));
                        }
                        out.extend_from_slice(&f.to_le_bytes());
                    }
                }
                DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(fmt_err("not a checkpoint (bad magic bytes)"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| fmt_err(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| fmt_err("tensor name is not UTF-8"))?
                .to_string();
            let order = r.u32()? as usize;
            let shape: Vec<usize> = (0..order).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt_err(format!("{name}: dims overflow")))?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(fmt_err(format!("{name}: unknown dtype tag {t}"))),
            };
            let bytes = numel
                .checked_mul(dtype.size_in_bytes())
                .ok_or_else(|| fmt_err(format!("{name}: payload overflow")))?;
            let payload = r.take(bytes)?;
            let data: Vec<f64> = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let t = Tensor::new(shape, data).map_err(|e| fmt_err(format!("{name}: {e}")))?;
            tensors.push((name, t.to_dtype(dtype)));
        }
        if r.pos != buf.len() {
            return Err(fmt_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// `name  dtype  [dims]` per tensor.
    pub fn inventory(&self) -> Vec<String> {
        self.tensors
            .iter()
            .map(|(n, t)| format!("{n}\t{}\t{:?}", if t.dtype() == DType::F32 { "f32" } else { "f64" }, t.shape()))
            .collect()
    }
}
