//! Binary parameter checkpoints.
//!
//! Little-endian layout: `b"ENFN"`, `u32` version, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, one `u32`
//! per dimension and the `f64` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"ENFN";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.numel() * 8 + store.len() * 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "truncated checkpoint: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format!("bad magic {magic:?}, expected \"ENFN\""));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version} (expected {VERSION})"));
    }
    let count = cur.u32("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| format!("tensor {i}: name is not UTF-8"))?
            .to_owned();
        let ndim = cur.u8("rank")? as usize;
        if ndim > 4 {
            return Err(format!("tensor {name}: rank {ndim} exceeds 4"));
        }
        let mut dims = [1usize; 4];
        for k in 0..ndim {
            dims[4 - ndim + k] = cur.u32("dimension")? as usize;
        }
        let shape = Shape(dims);
        let numel = shape.numel();
        let raw = cur.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| format!("tensor {name}: size overflow"))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.contains(&name) {
            return Err(format!("duplicate tensor {name}"));
        }
        store.insert(name, Tensor::from_vec(shape, data).map_err(|e| e.to_string())?);
    }
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes after last tensor", bytes.len() - cur.pos));
    }
    Ok(store)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    decode_inner(bytes).map_err(|d| Error::format(path, d))
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
