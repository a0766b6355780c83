//! Binary checkpoints.
//!
//! Layout, all little-endian: the 8-byte magic `TIMERXL\0`, a `u32` format
//! version, a `u32`-prefixed JSON model config, a `u32` record count, then
//! per record a `u32`-prefixed UTF-8 name, `u32` rank, `u32` dims and raw
//! `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_shapes, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TIMERXL\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::contract(e.to_string()))?;
    push_len(&mut out, config.len())?;
    out.extend_from_slice(&config);
    let named = model.params.named();
    push_len(&mut out, named.len())?;
    for (name, t) in named {
        push_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_len(&mut out, t.rank())?;
        for &d in t.shape() {
            push_len(&mut out, d)?;
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn push_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::contract(format!("{n} does not fit in a u32 field")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Model<f32>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| format!("config: {e}"))?;
    config.validate().map_err(|e| e.to_string())?;
    let shapes = param_shapes(&config);
    let expected = shapes.named();
    let count = r.u32()?;
    if count != expected.len() {
        return Err(format!("expected {} records, found {count}", expected.len()));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?;
        if name != want_name {
            return Err(format!("expected record {want_name}, found {name}"));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        if &shape != *want_shape {
            return Err(format!("{name}: shape {shape:?}, expected {want_shape:?}"));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or("record too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(&shape, data).map_err(|e| e.to_string())?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let mut it = tensors.into_iter();
    let params = shapes.map(|_| it.next().expect("record count checked"));
    Model::from_params(config, params).map_err(|e| e.to_string())
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let fail = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    from_bytes(&bytes).map_err(fail)
}
