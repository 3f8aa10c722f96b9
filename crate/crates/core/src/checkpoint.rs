//! ATCK checkpoint container.
//!
//! Little-endian layout: magic `ATCK`, u32 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, u32 rank, rank × u32 extents and
//! the f32 data. A trailer of u32 length plus UTF-8 JSON carries the model
//! configuration so a checkpoint can be reloaded without extra files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{DepressionModel, TrainConfig};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub input_dims: (usize, usize),
    /// Whether the joint phase has run, or only extractor pretraining.
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: Option<String>,
}

pub fn encode_checkpoint(tensors: &[(&str, &Tensor<f32>)], meta: Option<&str>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Shape(format!("tensor name {name:?} too long")))?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "write_checkpoint" });
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(meta) = meta {
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("truncated: wanted {n} bytes"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format { offset: at + 2, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or_else(|| Error::Format { offset: r.pos, message: "size overflow".into() })?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
        tensors.push((name, t));
    }
    let meta = if r.pos == bytes.len() {
        None
    } else {
        let len = r.u32()? as usize;
        let at = r.pos;
        let s = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format { offset: at, message: "metadata is not UTF-8".into() })?;
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, message: "trailing bytes".into() });
        }
        Some(s.to_string())
    };
    Ok(Checkpoint { tensors, meta })
}

pub fn write_store(path: impl AsRef<Path>, store: &ParamStore<f32>, meta: Option<&str>) -> Result<()> {
    let tensors: Vec<(&str, &Tensor<f32>)> = store.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    let bytes = encode_checkpoint(&tensors, meta)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes)
}

/// Copies every tensor whose name exists in `store`; returns how many were
/// copied. Shape disagreements are errors.
pub fn load_into(store: &mut ParamStore<f32>, tensors: &[(String, Tensor<f32>)]) -> Result<usize> {
    let mut copied = 0;
    for (name, t) in tensors {
        if let Some(id) = store.find(name) {
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            copied += 1;
        }
    }
    Ok(copied)
}

impl DepressionModel {
    pub fn save(&self, path: impl AsRef<Path>, stage: &str) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            input_dims: self.input_dims,
            stage: stage.to_string(),
        };
        write_store(path, &self.store, Some(&serde_json::to_string(&meta)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let ck = read_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(
            ck.meta
                .as_deref()
                .ok_or_else(|| Error::Data("checkpoint carries no model configuration".into()))?,
        )?;
        let mut model = DepressionModel::new(&meta.config, meta.input_dims)?;
        let copied = load_into(&mut model.store, &ck.tensors)?;
        if copied != model.store.len() || copied != ck.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model has {}, {copied} matched",
                ck.tensors.len(),
                model.store.len()
            )));
        }
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_meta() {
        let a = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.25]).unwrap();
        let b = Tensor::scalar(7.0);
        let bytes = encode_checkpoint(&[("w", &a), ("bias", &b)], Some("{\"x\":1}")).unwrap();
        assert_eq!(&bytes[..4], b"ATCK");
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.tensors, vec![("w".to_string(), a), ("bias".to_string(), b)]);
        assert_eq!(ck.meta.as_deref(), Some("{\"x\":1}"));
        let bare = encode_checkpoint(&[], None).unwrap();
        assert_eq!(bare.len(), 12);
        assert_eq!(decode_checkpoint(&bare).unwrap().tensors.len(), 0);
    }

    #[test]
    fn corrupt_inputs() {
        let t = Tensor::scalar(1.0);
        let bytes = encode_checkpoint(&[("w", &t)], None).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
