//! Binary tensor container used for checkpoints, mask sidecars and feature
//! tables.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GATN1"
//! repeated until end of file:
//!     u32  name length in bytes
//!     [u8] UTF-8 name
//!     u32  rank
//!     u64  × rank   dimensions
//!     f64  × product(dims)   values, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GATN1";

/// Ordered list of named tensors.
pub type Entries = Vec<(String, Tensor)>;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Entries> {
    let bad = |detail: String| Error::format(origin, detail);
    if bytes.get(..MAGIC.len()) != Some(MAGIC.as_slice()) {
        return Err(bad("missing GATN1 magic".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let truncated = || bad(format!("truncated entry #{}", entries.len()));
        let name_len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(name_len).ok_or_else(truncated)?)
            .map_err(|e| bad(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("`{name}` has an overflowing shape {shape:?}")))?;
        let raw =
            r.take(count.checked_mul(8).ok_or_else(truncated)?).ok_or_else(|| bad(format!("`{name}` is truncated")))?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Entries> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Looks up a named entry.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}
