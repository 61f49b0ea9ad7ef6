//! `MLLW1` parameter files.
//!
//! Layout: the 5-byte magic `MLLW1`, then records until end of file. Each
//! record is a `u32` name length, the UTF-8 name, a `u32` rank, `rank` x `u64`
//! dimensions and the `f64` payload in row-major order. All integers and
//! floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{NnError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MLLW1";

pub fn write_records<W: Write>(mut w: W, records: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode_records(records: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(&mut buf, records).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_records(&bytes)
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(NnError::Format("missing MLLW1 magic".into()));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(NnError::Format(format!("{name}: rank {rank} unsupported")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel.checked_mul(8).ok_or_else(|| NnError::Format("size overflow".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| NnError::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[(&str, &Tensor)]) -> Result<()> {
    fs::write(path, encode_records(records))?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_records(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Format(format!("truncated record at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
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
