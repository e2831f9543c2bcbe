//! `.clra` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CLRA"  u32 version  u64 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, u64 dims[rank],
//!             f64 payload[product(dims)] (row-major)
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! Architecture and adapter metadata travel as ordinary tensors:
//! `meta.model` holds the seven [`ModelSpec`] fields and `meta.lora`
//! holds `(rank, scaling)` when adapters are attached. Adapter factors are
//! stored as `lora.<target>.A` / `lora.<target>.B`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{self, AdapterSet};
use crate::nn::{ModelSpec, SegModel};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CLRA";
pub const VERSION: u32 = 1;
const META_MODEL: &str = "meta.model";
const META_LORA: &str = "meta.lora";

fn spec_to_vec(s: &ModelSpec) -> Vec<f64> {
    [s.image_size, s.patch_size, s.embed_dim, s.num_heads, s.num_layers, s.mlp_ratio, s.num_classes]
        .iter()
        .map(|&v| v as f64)
        .collect()
}

fn spec_from_vec(v: &[f64]) -> Result<ModelSpec> {
    if v.len() != 7 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(Error::Checkpoint("malformed meta.model tensor".into()));
    }
    let u = |i: usize| v[i] as usize;
    Ok(ModelSpec {
        image_size: u(0),
        patch_size: u(1),
        embed_dim: u(2),
        num_heads: u(3),
        num_layers: u(4),
        mlp_ratio: u(5),
        num_classes: u(6),
    })
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f64>) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend((d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend(v.to_le_bytes());
    }
}

/// Serialises a model (and its attached adapters) to bytes.
pub fn encode<S: Scalar>(model: &SegModel<S>) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    entries.push((META_MODEL.into(), vec![7], spec_to_vec(model.spec())));
    if let Some(set) = model.adapters() {
        entries.push((META_LORA.into(), vec![2], vec![set.rank() as f64, set.scaling()]));
    }
    let stores = std::iter::once(model.params()).chain(model.adapters().map(AdapterSet::params));
    for store in stores {
        for (name, t) in store.iter() {
            entries.push((name.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect()));
        }
    }
    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    buf.extend((entries.len() as u64).to_le_bytes());
    for (name, shape, data) in &entries {
        put_tensor(&mut buf, name, shape, data.iter().copied());
    }
    let digest = Sha256::digest(&buf);
    buf.extend(digest.iter());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint into named tensors, verifying magic, version and
/// checksum.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f64>)>> {
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if &body[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Rebuilds a model from checkpoint bytes. Adapters, when present, are
/// attached and the encoder frozen; otherwise every parameter is trainable.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<SegModel<S>> {
    let tensors = decode_tensors(bytes)?;
    let mut iter = tensors.into_iter().peekable();
    let spec = match iter.next() {
        Some((name, t)) if name == META_MODEL => spec_from_vec(t.data())?,
        _ => return Err(Error::Checkpoint("first tensor must be meta.model".into())),
    };
    let lora_meta = match iter.peek() {
        Some((name, t)) if name == META_LORA => {
            let v = t.data().to_vec();
            iter.next();
            Some((v[0] as usize, v[1]))
        }
        _ => None,
    };
    let mut model = SegModel::<S>::new(spec, 0)?;
    let mut adapter_params = ParamStore::new();
    let mut seen = 0;
    for (name, t) in iter {
        let cast: Tensor<S> = t.cast();
        if name.starts_with("lora.") {
            adapter_params.insert(name, cast.with_grad(true))?;
            continue;
        }
        let slot = model
            .params_mut()
            .get_mut(&name)
            .map_err(|_| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if slot.shape() != cast.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                cast.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(cast.data());
        seen += 1;
    }
    if seen != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} of {} model tensors",
            model.params().len()
        )));
    }
    match lora_meta {
        Some((rank, scaling)) => {
            let set = AdapterSet::from_params(&model, rank, scaling, adapter_params)?;
            lora::attach(&mut model, set)?;
        }
        None if !adapter_params.is_empty() => {
            return Err(Error::Checkpoint("adapter tensors without meta.lora".into()));
        }
        None => {}
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &SegModel<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<SegModel<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
