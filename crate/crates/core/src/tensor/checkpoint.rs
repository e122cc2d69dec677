//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"ACE1"
//! version u32
//! count   u32
//! count x { name_len u32, name bytes (UTF-8), rows u64, cols u64, rows*cols f64 }
//! ```

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACE1";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 4 + n.len() + 16 + 8 * t.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_parts(rows, cols, data)));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
