//! Binary checkpoint format.
//!
//! ```text
//! magic "SAMLCKPT" | u32 version | u32 len | JSON metadata | u32 count | tensors…
//! tensor: u16 len | name | u8 dtype | u8 ndim | u32 dims… | u32 block
//!         | u64 payload len | u32 crc32(payload) | payload
//! ```
//!
//! All integers are little-endian. Quantised tensors are stored as their
//! packed 4-bit payload, everything else as raw f32. Metadata maps are
//! ordered so that saving the same model twice yields identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttnProjection, CompressionSummary, LayerRouting, ModelConfig, Stage, TinyTransformer};
use crate::adapters::LayerMode;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, Tensor};
use crate::quantization::{self, CodebookId, QuantizedTensor};

pub const MAGIC: &[u8; 8] = b"SAMLCKPT";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_NF4: u8 = 1;
const DTYPE_UNIFORM4: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub mode: LayerMode,
    pub dominant: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub stage: Stage,
    pub speaker: Option<u32>,
    pub layers: BTreeMap<String, LayerState>,
    pub routing: Vec<LayerRouting>,
    pub compression: Option<CompressionSummary>,
}

impl CheckpointMeta {
    fn of(model: &TinyTransformer) -> Self {
        Self {
            config: model.config.clone(),
            stage: model.stage,
            speaker: model.speaker,
            layers: model
                .layer_modes()
                .into_iter()
                .map(|(k, (mode, dominant))| (k, LayerState { mode, dominant }))
                .collect(),
            routing: model.routing.clone(),
            compression: model.compression.clone(),
        }
    }
}

/// Serialises `model` into a byte vector.
pub fn write_checkpoint(model: &TinyTransformer) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&CheckpointMeta::of(model))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?.to_le_bytes());
    out.extend_from_slice(&meta);
    let ids: Vec<ParamId> = model.store.ids().collect();
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let name = model.store.name(id).as_bytes();
        let value = model.store.value(id);
        let (dtype, block, payload) = match model.quantized_tensor(id) {
            Some(q) => {
                let dtype = match q.codebook() {
                    CodebookId::Nf4 => DTYPE_NF4,
                    CodebookId::Uniform4 => DTYPE_UNIFORM4,
                };
                (dtype, q.block_size() as u32, q.payload())
            }
            None => (DTYPE_F32, 0, value.data().iter().flat_map(|v| v.to_le_bytes()).collect()),
        };
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(dtype);
        out.push(value.shape().len() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&block.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &TinyTransformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TinyTransformer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Rebuilds a model from checkpoint bytes. The architecture is rebuilt from
/// the stored config, pruned layers are restructured, then every tensor is
/// overwritten from the file.
pub fn read_checkpoint(bytes: &[u8]) -> Result<TinyTransformer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    r.pos = MAGIC.len();
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;

    let mut model = TinyTransformer::new(meta.config.clone())?;
    model.stage = meta.stage;
    model.speaker = meta.speaker;
    model.routing = meta.routing;
    model.compression = meta.compression;
    let mut seen = 0usize;
    let store = &mut model.store;
    let layers = model.blocks.iter_mut().flat_map(|b| b.attn.iter_mut()).filter_map(|a| match a {
        AttnProjection::Saml(l) => Some(l),
        AttnProjection::Plain(_) => None,
    });
    for layer in layers {
        let Some(state) = meta.layers.get(layer.prefix()) else {
            return Err(Error::Layout(format!("no metadata for layer `{}`", layer.prefix())));
        };
        seen += 1;
        if state.mode != layer.mode {
            let dominant = state
                .dominant
                .ok_or_else(|| Error::Layout(format!("pruned layer `{}` has no dominant expert", layer.prefix())))?;
            layer.restructure(store, state.mode, dominant)?;
        }
    }
    if seen != meta.layers.len() {
        return Err(Error::Layout(format!("metadata describes {} layers, model has {seen}", meta.layers.len())));
    }

    let count = r.u32("tensor count")? as usize;
    let live = model.store.len();
    if count != live {
        return Err(Error::Layout(format!("file has {count} tensors, model expects {live}")));
    }
    let mut loaded = vec![false; model.store.ids().map(|id| id.index() + 1).max().unwrap_or(0)];
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let block = r.u32("block size")? as usize;
        let plen = r.u64("payload length")? as usize;
        let crc = r.u32("checksum")?;
        let payload = r.take(plen, &format!("payload of `{name}`"))?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::CorruptTensor(name));
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Layout(format!("unexpected tensor `{name}`")))?;
        if model.store.value(id).shape() != shape.as_slice() {
            return Err(Error::Layout(format!(
                "tensor `{name}` has shape {shape:?}, model expects {:?}",
                model.store.value(id).shape()
            )));
        }
        if std::mem::replace(&mut loaded[id.index()], true) {
            return Err(Error::Layout(format!("tensor `{name}` appears twice")));
        }
        let value = match dtype {
            DTYPE_F32 => {
                if plen != 4 * shape.iter().product::<usize>() {
                    return Err(Error::Layout(format!("fp32 tensor `{name}` has {plen} payload bytes")));
                }
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::new(&shape, data)?
            }
            DTYPE_NF4 | DTYPE_UNIFORM4 => {
                let cb = if dtype == DTYPE_NF4 {
                    CodebookId::Nf4
                } else {
                    CodebookId::Uniform4
                };
                let q = QuantizedTensor::from_payload(&shape, block, cb, payload)?;
                let v = quantization::dequantize(&q)?;
                model.set_quantized(id, q);
                v
            }
            tag => return Err(Error::UnknownDtype { tensor: name, tag }),
        };
        model.store.get_mut(id).value = value;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.freeze_base();
    Ok(model)
}
