//! Model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "LATN"
//! version u32
//! config  u32 byte length + JSON-encoded ModelConfig
//! count   u32 number of parameter blocks
//! block*  u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f32 data
//! ```
//!
//! Parameters are stored as `f32`; a loaded model equals the saved one up to
//! `f32` rounding, and saving it again reproduces the same bytes.

use std::fs;
use std::path::Path;

use crate::encoder::{Model, ModelConfig, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LATN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let blob = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    let params = model.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let blob_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(blob_len)?)
        .map_err(|e| Error::format(path, format!("config blob: {e}")))?;
    let mut model = Model::new(config, 0).map_err(|e| Error::format(path, e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::format(
            path,
            format!("{count} parameter blocks, config implies {}", expected.len()),
        ));
    }
    let mut slots = model.params_mut();
    for (slot, (want_name, want_shape)) in slots.iter_mut().zip(&expected) {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        if name != want_name {
            return Err(Error::format(path, format!("expected block {want_name}, found {name}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if &shape != want_shape {
            return Err(Error::format(
                path,
                format!("{name}: shape {shape:?}, expected {want_shape:?}"),
            ));
        }
        let len: usize = shape.iter().product();
        let data = r
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        **slot = Tensor::new(shape, data).map_err(|_| Error::format(path, format!("{name}: non-finite value")))?;
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last block"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}
