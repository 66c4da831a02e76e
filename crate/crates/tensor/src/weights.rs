//! Binary weight files.
//!
//! Layout (little-endian): magic `CEHRW`, version `u32`, record count `u32`,
//! then per record: name length `u16`, UTF-8 name, rank `u8`, extents as
//! `u32`, and the values as `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CEHRW";
pub const VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

/// Serializes named tensors in the given order.
pub fn encode<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| fmt_err("too many records"))?.to_le_bytes());
    for (name, t) in records {
        let len = u16::try_from(name.len()).map_err(|_| fmt_err(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| fmt_err(format!("rank too large for {name}")))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| fmt_err(format!("extent too large for {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a weight file into `(name, tensor)` records.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(5)? != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| fmt_err("record name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| fmt_err(format!("extent overflow in {name}")))?;
        let raw = c.take(numel.checked_mul(4).ok_or_else(|| fmt_err("payload overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode(store.iter().map(|(_, n, t)| (n, t)))?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Loads a file into an existing store. Every stored parameter must be
/// present with the same shape; extra records in the file are an error.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let records = read(path)?;
    if records.len() != store.len() {
        return Err(fmt_err(format!(
            "file has {} records, model expects {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        store.set(&name, t)?;
    }
    Ok(())
}
