//! `MICK0001` checkpoints.
//!
//! Layout (little-endian): magic, `u32` length of a JSON metadata block and
//! the block itself, `u32` tensor count, then per tensor `u16` name length,
//! UTF-8 name, `u8` rank, `u32` dims, `u8` dtype and the payload. The file
//! ends with the SHA-256 of everything before it.
//!
//! Tensors are the base weights (`base/…`), adapter weights (`adapter/…`)
//! and the optimizer moments (`optim.m/…`, `optim.v/…`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, AdamConfig, TrainConfig};
use crate::adapters::AdapterSet;
use crate::diffusion::ScheduleState;
use crate::model::{BaseWeights, Model, ModelConfig};
use crate::numerics::{DType, Real, Rng, RngState, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MICK0001";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub optim: Adam<T>,
    pub schedule: Option<ScheduleState>,
    pub rng: RngState,
    pub step: usize,
    pub sampler_turn: usize,
    /// Hash of the base weights an adapter stage started from.
    pub frozen_base_hash: Option<String>,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    train: TrainConfig,
    has_adapters: bool,
    schedule: Option<ScheduleState>,
    rng: String,
    step: usize,
    sampler_turn: usize,
    adam: AdamConfig,
    adam_t: u64,
    frozen_base_hash: Option<String>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE as u8);
    for &v in t.data() {
        v.write_le(out);
    }
}

/// SHA-256 (hex) over the base weights in checkpoint encoding.
pub fn base_weight_hash<T: Real>(model: &Model<T>) -> String {
    let mut buf = Vec::new();
    for (name, t) in model.base.named("base/") {
        put_tensor(&mut buf, &name, t);
    }
    hex::encode(Sha256::digest(&buf))
}

pub fn checkpoint_to_bytes<T: Real>(c: &Checkpoint<T>) -> Result<Vec<u8>> {
    let meta = Meta {
        config: c.model.config.clone(),
        train: c.train.clone(),
        has_adapters: c.model.adapters.is_some(),
        schedule: c.schedule.clone(),
        rng: hex::encode(c.rng.to_bytes()),
        step: c.step,
        sampler_turn: c.sampler_turn,
        adam: c.optim.config,
        adam_t: c.optim.t,
        frozen_base_hash: c.frozen_base_hash.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| format_err(e.to_string()))?;
    let mut tensors: Vec<(String, &Tensor<T>)> = c.model.base.named("base/");
    if let Some(a) = &c.model.adapters {
        tensors.extend(a.named("adapter/"));
    }
    tensors.extend(c.optim.m.iter().map(|(n, t)| (format!("optim.m/{n}"), t)));
    tensors.extend(c.optim.v.iter().map(|(n, t)| (format!("optim.v/{n}"), t)));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut out, name, t);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

fn fill<W>(
    tensors: &mut BTreeMap<String, Tensor<W>>,
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor<W>)),
) -> Result<()>
where
    W: Real,
{
    let mut err = None;
    visit(&mut |name, slot| match tensors.remove(name) {
        Some(t) if t.shape() == slot.shape() => *slot = t,
        Some(t) => {
            err.get_or_insert_with(|| {
                format_err(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape()))
            });
        }
        None => {
            err.get_or_insert_with(|| format_err(format!("missing tensor {name}")));
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 8 {
        return Err(format_err("file too short for a checkpoint"));
    }
    if &bytes[..4] == b"MICK" && &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(format!("unsupported checkpoint version {}", String::from_utf8_lossy(&bytes[4..8]))));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC || bytes.len() < 8 + 32 {
        return Err(format_err("not a MICK0001 checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(format_err("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let meta_len = r.u32()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| format_err(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| format_err("tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| format_err(format!("{name}: unknown dtype")))?;
        if dtype != T::DTYPE {
            return Err(Error::ConfigMismatch(format!("{name} is stored as {dtype:?}, loading as {:?}", T::DTYPE)));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| format_err("tensor size overflow"))?)?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        tensors.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(format_err(format!("{} trailing bytes", body.len() - r.pos)));
    }

    meta.config.validate()?;
    // Shapes come from freshly initialized weights; values are overwritten.
    let mut scratch = Rng::seed_from(0);
    let mut base = BaseWeights::<Tensor<T>>::init(&meta.config, &mut scratch)?;
    fill(&mut tensors, |f| base.for_each_mut("base/", f))?;
    let adapters = if meta.has_adapters {
        let mut a = AdapterSet::<Tensor<T>>::init(&meta.config.adapter_layout(), &mut scratch)?;
        fill(&mut tensors, |f| a.for_each_mut("adapter/", f))?;
        Some(a)
    } else {
        None
    };
    let mut optim = Adam::new(meta.adam)?;
    optim.t = meta.adam_t;
    for (name, t) in std::mem::take(&mut tensors) {
        if let Some(n) = name.strip_prefix("optim.m/") {
            optim.m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("optim.v/") {
            optim.v.insert(n.to_string(), t);
        } else {
            return Err(format_err(format!("unexpected tensor {name}")));
        }
    }
    let rng_bytes = hex::decode(&meta.rng).map_err(|_| format_err("rng state is not hex"))?;
    let rng = RngState::from_bytes(&rng_bytes).ok_or_else(|| format_err("bad rng state length"))?;
    Ok(Checkpoint {
        model: Model { config: meta.config, base, adapters },
        optim,
        schedule: meta.schedule,
        rng,
        step: meta.step,
        sampler_turn: meta.sampler_turn,
        frozen_base_hash: meta.frozen_base_hash,
        train: meta.train,
    })
}

/// Writes via a temporary file and rename, so readers never observe a
/// partial checkpoint.
pub fn save_checkpoint<T: Real>(c: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(c)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
