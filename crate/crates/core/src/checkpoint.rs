//! Binary checkpoint files.
//!
//! Layout: `ACDC`, u32 version, u32 entry count, then per entry a u32 name
//! length, the UTF-8 name, a u8 dtype code, a u8 rank, u32 dims and the
//! little-endian payload. A CRC32 of every preceding byte closes the file.
//! All integers are little-endian.
//!
//! Dtype 0 holds f32 tensors. Dtype 1 holds raw bytes and carries the JSON
//! metadata entries `meta/model_config` and `meta/train_state`.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: [u8; 4] = *b"ACDC";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

const MODEL_CONFIG: &str = "meta/model_config";
const TRAIN_STATE: &str = "meta/train_state";
pub const PARAM_PREFIX: &str = "param/";
pub const BUFFER_PREFIX: &str = "buffer/";
pub const ADAM_M_PREFIX: &str = "adam.m/";
pub const ADAM_V_PREFIX: &str = "adam.v/";

/// Everything needed to rebuild a model and, optionally, continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    /// Prefixed tensor names in file order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    /// Weights and batch-norm buffers of `model`, without training state.
    pub fn from_model(model: &Model<f32>) -> Self {
        let tensors = model
            .store()
            .entries()
            .iter()
            .map(|e| {
                let prefix = if e.trainable { PARAM_PREFIX } else { BUFFER_PREFIX };
                (format!("{prefix}{}", e.name), e.value.clone())
            })
            .collect();
        Self { model_config: model.config().clone(), tensors, train_state: None }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors under `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.tensors.iter().filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    /// Copies every stored weight and buffer into `model`. Nothing is
    /// written unless every name and shape matches.
    pub fn apply_to(&self, model: &mut Model<f32>) -> Result<()> {
        if &self.model_config != model.config() {
            return Err(CheckpointError::Mismatch("model configuration differs from the checkpoint".into()).into());
        }
        let store = model.store();
        let mut updates = Vec::with_capacity(store.len());
        for id in store.ids() {
            let e = store.entry(id);
            let prefix = if e.trainable { PARAM_PREFIX } else { BUFFER_PREFIX };
            let name = format!("{prefix}{}", e.name);
            let t = self.tensor(&name).ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {name}")))?;
            if t.shape() != e.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    e.value.shape()
                ))
                .into());
            }
            updates.push((id, t.clone()));
        }
        let stored = self.with_prefix(PARAM_PREFIX).count() + self.with_prefix(BUFFER_PREFIX).count();
        if stored != updates.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint holds {stored} weights and buffers, model has {}",
                updates.len()
            ))
            .into());
        }
        let store = model.store_mut();
        for (id, t) in updates {
            store.set(id, t)?;
        }
        Ok(())
    }

    /// Builds the model described by the checkpoint and loads its weights.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.model_config.clone(), 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(&str, Entry<'_>)> =
            vec![(MODEL_CONFIG, Entry::Bytes(serde_json::to_vec(&self.model_config)?))];
        for (n, t) in &self.tensors {
            entries.push((n, Entry::F32(t)));
        }
        if let Some(s) = &self.train_state {
            entries.push((TRAIN_STATE, Entry::Bytes(serde_json::to_vec(s)?)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(entries.len(), "entry count")?.to_le_bytes());
        for (name, entry) in &entries {
            out.extend_from_slice(&u32_len(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::F32(t) => {
                    out.push(DTYPE_F32);
                    let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::Malformed(format!("{name}: rank too large")))?;
                    out.push(rank);
                    for &d in t.shape() {
                        out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(DTYPE_BYTES);
                    out.push(1);
                    out.extend_from_slice(&u32_len(b.len(), "metadata length")?.to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION }.into());
        }
        let count = r.u32("entry count")? as usize;
        let mut model_config = None;
        let mut train_state = None;
        let mut tensors = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::Malformed(format!("duplicate entry {name}")).into());
            }
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            match dtype {
                DTYPE_F32 => {
                    let bytes_len = numel
                        .and_then(|n| n.checked_mul(4))
                        .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape {shape:?} too large")))?;
                    let raw = r.take(bytes_len, "tensor payload")?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    tensors.push((name, Tensor::from_vec(&shape, data)?));
                }
                DTYPE_BYTES => {
                    if rank != 1 {
                        return Err(CheckpointError::Malformed(format!("{name}: byte entry of rank {rank}")).into());
                    }
                    let raw = r.take(shape[0], "metadata payload")?;
                    match name.as_str() {
                        MODEL_CONFIG => {
                            model_config = Some(
                                serde_json::from_slice(raw)
                                    .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?,
                            );
                        }
                        TRAIN_STATE => {
                            train_state = Some(
                                serde_json::from_slice(raw)
                                    .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?,
                            );
                        }
                        _ => return Err(CheckpointError::Malformed(format!("unknown metadata entry {name}")).into()),
                    }
                }
                other => return Err(CheckpointError::Malformed(format!("{name}: unknown dtype code {other}")).into()),
            }
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }
        let model_config =
            model_config.ok_or_else(|| CheckpointError::Malformed(format!("missing {MODEL_CONFIG} entry")))?;
        Ok(Self { model_config, tensors, train_state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

enum Entry<'a> {
    F32(&'a Tensor<f32>),
    Bytes(Vec<u8>),
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| CheckpointError::Malformed(format!("{what} {n} exceeds u32")).into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
