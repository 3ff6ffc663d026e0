//! `SAVIOR-TENSORS v1` binary tensor files.
//!
//! Layout: the ASCII header line `SAVIOR-TENSORS v1\n`, then one record per
//! tensor until end of file. A record is `u32` name length, UTF-8 name bytes,
//! `u32` rank, `rank` × `u64` dimensions, then the row-major payload as
//! little-endian `f64`. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const HEADER: &[u8] = b"SAVIOR-TENSORS v1\n";

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = HEADER.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated record at byte {} (wanted {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(HEADER) {
        return Err(Error::Format("missing `SAVIOR-TENSORS v1` header".into()));
    }
    let mut cur = Cursor {
        buf: bytes,
        pos: HEADER.len(),
    };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    crate::io::atomic_write(path, &encode(tensors))
}

pub fn write_to(mut w: impl Write, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(&encode(tensors))?;
    Ok(())
}
