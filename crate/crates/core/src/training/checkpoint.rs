//! Binary checkpoint: magic, version, JSON metadata, then named f32 arrays.
//!
//! ```text
//! "TABDECO\0" | u32 version | u32 len | metadata JSON
//! u32 count | per array: u32 name len | name | u32 rank | u32 dims.. | f32 data..
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputLayout, ModelConfig, ModelParams, TabDeco};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TABDECO\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    model_config: ModelConfig,
    layout: InputLayout,
    extra: serde_json::Value,
}

/// Everything needed to rebuild a trained model. `extra` carries caller data
/// such as the fitted encoder and normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TabDeco,
    pub params: ModelParams,
    pub extra: serde_json::Value,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.model.check_params(&ckpt.params)?;
    let meta = Metadata {
        model_config: ckpt.model.config.clone(),
        layout: ckpt.model.layout.clone(),
        extra: ckpt.extra.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 4 * ckpt.params.n_values() + 1024);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_len(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let names = ckpt.params.names();
    put_len(&mut out, names.len())?;
    for (name, t) in names.iter().zip(ckpt.params.to_vec()) {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.rank())?;
        for &d in t.shape() {
            put_len(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let json_len = r.len("metadata length")?;
    let meta: Metadata =
        serde_json::from_slice(r.take(json_len, "metadata")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let model = TabDeco::new(meta.model_config, meta.layout)?;
    let count = r.len("parameter count")?;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.len("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.len("rank")?;
        let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
        let raw = r.take(numel, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        arrays.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let template = model.init(0);
    let names = template.names();
    if names.len() != arrays.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {}",
            names.len(),
            arrays.len()
        )));
    }
    let mut arrays = arrays.into_iter();
    let params = template.try_map(&mut |name, want| {
        let (found, t) = arrays.next().expect("counts checked");
        if found != name || t.shape() != want.shape() {
            return Err(Error::Checkpoint(format!(
                "expected `{name}` {:?}, found `{found}` {:?}",
                want.shape(),
                t.shape()
            )));
        }
        Ok(t)
    })?;
    Ok(Checkpoint {
        model,
        params,
        extra: meta.extra,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and requires its model config to equal `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.model.config != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {:?} (d={}, layers={}, heads={}), expected {:?} (d={}, layers={}, heads={})",
            ckpt.model.config.variant,
            ckpt.model.config.d,
            ckpt.model.config.layers,
            ckpt.model.config.heads,
            expected.variant,
            expected.d,
            expected.layers,
            expected.heads,
        )));
    }
    Ok(ckpt)
}
