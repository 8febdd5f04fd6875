//! `MSLQ` checkpoint files.
//!
//! Layout (little-endian): magic `MSLQ`, `u32` version, `u32` metadata
//! length, metadata as UTF-8 JSON, `u32` tensor count, then per tensor a
//! `u16` name length, the name, a `u8` rank, `u32` dims, and `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossConfig, TrainConfig};
use crate::augment::ZoomRegistry;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, MultiHeadModel};
use crate::ndgrad::Tensor;

pub const MAGIC: &[u8; 4] = b"MSLQ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub registry: ZoomRegistry,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Training-set MOS statistics used to z-normalise targets.
    pub mos_mean: f64,
    pub mos_std: f64,
    pub best_head: usize,
    pub epoch: usize,
    pub seed: u64,
    /// Effective run configuration echoed by the caller, if any.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(meta: CheckpointMeta, model: &MultiHeadModel<f32>) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                t.zero_grad();
                (n, Tensor::from_slice(t.shape(), t.data()).expect("valid shape"))
            })
            .collect();
        Self { meta, tensors }
    }

    pub fn model(&self) -> Result<MultiHeadModel<f32>> {
        MultiHeadModel::from_named(self.meta.backbone, self.meta.registry.len(), self.tensors.clone())
    }

    /// Converts a normalised prediction back to MOS units.
    pub fn denormalize(&self, score: f64) -> f64 {
        score * self.meta.mos_std + self.meta.mos_mean
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::with_capacity(16 + meta.len() + self.tensors.iter().map(|(_, t)| 4 * t.numel() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::data("metadata too large"))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::data(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.shape().len()).map_err(|_| Error::data("tensor rank above 255"))?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::data("bad magic at offset 0"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version} at offset 4")));
        }
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::data(format!("bad checkpoint metadata at offset {meta_at}: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::data(format!("tensor name is not UTF-8 at offset {at}")))?
                .to_owned();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::data(format!("tensor size overflow at offset {at}")))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::data(format!("tensor `{name}` at offset {at}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::data(format!("trailing bytes after offset {}", r.pos)));
        }
        Ok(Self { meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data(format!(
                "truncated checkpoint at offset {} (need {n} bytes, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
