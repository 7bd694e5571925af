//! Binary checkpoint format.
//!
//! ```text
//! "COSYNORM1"
//! u32 record_count
//! per record:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank × u32 dims
//!   product(dims) × f32 values
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"COSYNORM1";

const MAX_RANK: usize = 8;

pub fn encode_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in tensor.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    encode_records(store.records())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses checkpoint bytes into `(name, tensor)` records in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let count = r.u32()?;
    // Each record needs at least 8 bytes, so a count beyond that is corrupt.
    if count > r.remaining() / 8 {
        return Err(Error::format("checkpoint", format!("record count {count} exceeds file size")));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("checkpoint", format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(Error::format("checkpoint", format!("record {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32()?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format("checkpoint", format!("record {name}: size overflow")))?;
            shape.push(d);
        }
        let nbytes = numel
            .checked_mul(4)
            .ok_or_else(|| Error::format("checkpoint", format!("record {name}: size overflow")))?;
        let raw = r.take(nbytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        records.push((name, tensor));
    }
    if r.remaining() != 0 {
        return Err(Error::format("checkpoint", format!("{} trailing bytes", r.remaining())));
    }
    Ok(records)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    store.load_records(decode(&bytes)?)
}
