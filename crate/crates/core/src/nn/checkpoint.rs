//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SCAMODEL"  u32 version  u32 descriptor_len  descriptor (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u32 ndim  ndim × u64 extent  Π extent × f64
//! ```
//!
//! The descriptor holds the architecture and free-form metadata. Tensors
//! follow the model's declared parameter order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SCAMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    spec: ModelSpec,
    metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, String>,
}

pub fn encode_checkpoint(model: &Model, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let desc = Descriptor {
        spec: model.spec().clone(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&desc).map_err(|e| Error::Format(e.to_string()))?;
    let params = model.param_tensors();
    let mut out = Vec::with_capacity(24 + json.len() + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, t) in &params {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.array().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let desc: Descriptor =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("descriptor: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("tensor rank {ndim} out of range")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("extent overflow".into()))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("extent overflow".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(&shape, values).map_err(|e| Error::Format(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let model = Model::from_params(desc.spec, tensors)?;
    Ok(Checkpoint {
        model,
        metadata: desc.metadata,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, metadata: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, metadata)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sca::ScaHyper;

    fn meta() -> BTreeMap<String, String> {
        BTreeMap::from([("train_epsilon".to_string(), "0.05".to_string())])
    }

    #[test]
    fn round_trip_is_exact() {
        for spec in [
            ModelSpec::mlp(6, 5, 4, 3),
            ModelSpec::sca(6, 5, 4, 3, ScaHyper::default()),
        ] {
            let m = Model::new(spec, 9).unwrap();
            let bytes = encode_checkpoint(&m, &meta()).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back.model, m);
            assert_eq!(back.metadata, meta());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Model::new(ModelSpec::mlp5(8, 3), 1).unwrap();
        save_checkpoint(&path, &m, &BTreeMap::new()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().model, m);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::new(ModelSpec::mlp(4, 3, 3, 2), 0).unwrap();
        let bytes = encode_checkpoint(&m, &BTreeMap::new()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut ver = bytes;
        ver[8] = 7;
        assert!(decode_checkpoint(&ver).is_err());
    }
}
