//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//! `b"DDCKPT\0\0"`, `u32` version, `u32` config length, config JSON,
//! `u32` tensor count, then per tensor `u16` name length, name, `u8` rank,
//! `u32` dims, `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::transformer::{Transformer, Weights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 over the config and every named weight tensor, hex encoded.
pub fn fingerprint(model: &Transformer) -> String {
    let mut h = Sha256::new();
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    h.update((cfg.len() as u64).to_le_bytes());
    h.update(&cfg);
    for (name, t) in model.weights().named() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Fingerprint of the weights alone, independent of mask granularity.
pub fn weights_fingerprint(model: &Transformer) -> String {
    fingerprint(&model.with_granularity(Default::default()))
}

pub fn to_bytes(model: &Transformer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let named = model.weights().named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Input("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Transformer> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Input("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    config.validate()?;
    let count = r.u32()? as usize;
    let mut weights = Weights::init(&config, 0);
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    if count != names.len() {
        return Err(Error::Input(format!(
            "checkpoint holds {count} tensors, config implies {}",
            names.len()
        )));
    }
    for (expected, slot) in names.iter().zip(weights.tensors_mut()) {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        if &name != expected {
            return Err(Error::Input(format!(
                "expected tensor {expected}, found {name}"
            )));
        }
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Input(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Tensor::new(shape, data)?;
    }
    Transformer::new(config, weights)
}

pub fn save(model: &Transformer, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Transformer> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
