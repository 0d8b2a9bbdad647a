//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "TZCKPT01"
//! cfg_len  u32       length of the ModelConfig JSON that follows
//! cfg      cfg_len   serde_json of ModelConfig (UTF-8)
//! count    u32       number of tensor records
//! record := name_len u32 | name (UTF-8) | dtype u8 | rank u8
//!           | dims (rank × u32) | data (numel × dtype width, LE)
//! ```
//!
//! Tensor records appear in registry order; weight-tied tensors are owned
//! (and therefore serialized) exactly once — invocation sites are
//! reconstructed from the config and reference the shared blocks by index.
//! f64 data is stored as raw f64 bits, f32/f16 tensors at their narrower
//! width (their values are exactly representable there), so a save/load
//! round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::numerics::{Dtype, Tensor};

pub const MAGIC: &[u8; 8] = b"TZCKPT01";

/// Write bytes to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn encode_tensor_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(t.dtype().tag());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u32(out, d);
    }
    match t.dtype() {
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F16 => {
            for &v in t.data() {
                out.extend_from_slice(&half::f16::from_f64(v).to_le_bytes());
            }
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn decode_tensor_record(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = r.u32()?;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let dtype = Dtype::from_tag(r.u8()?)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag in `{name}`")))?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()?);
    }
    let numel: usize = shape.iter().product();
    let data = match dtype {
        Dtype::F64 => {
            let raw = r.take(numel * 8)?;
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
        Dtype::F32 => {
            let raw = r.take(numel * 4)?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        Dtype::F16 => {
            let raw = r.take(numel * 2)?;
            raw.chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()).to_f64())
                .collect::<Vec<f64>>()
        }
    };
    Ok((name, Tensor::from_vec(shape, dtype, data)?))
}

/// Serialize a model to the container format.
pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    let mut count = 0;
    model.visit_params(|_, _, _| count += 1);
    put_u32(&mut out, count);
    model.visit_params(|name, _, t| encode_tensor_record(&mut out, name, t));
    Ok(out)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

/// Rebuild a model from container bytes. The structure comes from the stored
/// config; every tensor record must match a registered parameter by name and
/// shape, and all parameters must be covered.
pub fn model_from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader::new(buf);
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let cfg_len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    let count = r.u32()?;
    let mut records = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, tensor) = decode_tensor_record(&mut r)?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if !r.is_done() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    let mut model = build_model(config, 0)?;
    let mut missing = Vec::new();
    model.visit_params_mut(|name, _, t| match records.remove(name) {
        Some(loaded) => {
            if loaded.shape() == t.shape() && loaded.dtype() == t.dtype() {
                let grad = t.is_param();
                *t = loaded.requires_grad(grad);
            } else {
                missing.push(format!("{name}: shape/dtype mismatch"));
            }
        }
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("bad records: {}", missing.join(", "))));
    }
    if !records.is_empty() {
        let extra: Vec<String> = records.into_keys().collect();
        return Err(Error::Checkpoint(format!("unknown tensors: {}", extra.join(", "))));
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}
