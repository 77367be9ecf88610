//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"CL2O"
//! version  u32            (currently 1)
//! count    u64            number of tensors
//! per tensor:
//!   name_len u32, name    UTF-8 bytes
//!   rank     u32
//!   dims     u64 x rank
//!   payload  f64 x product(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CL2O";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Little-endian cursor over an in-memory buffer that reports truncation as
/// a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated input: wanted {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| {
            Error::Format(format!("payload of {n} values overflows"))
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = Reader::new(&buf);
    rd.expect_magic(MAGIC)?;
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = rd.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.bytes(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = rd.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(rd.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
        let data = rd.f64s(n)?;
        let mut t = Tensor::new(shape, data)?;
        if !name.starts_with("meta.") {
            t.set_requires_grad(true);
        }
        store.insert(name, t);
    }
    if !rd.is_at_end() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "encoder.W",
            Tensor::param(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, -0.25]).unwrap(),
        );
        s.insert("meta.top_g", Tensor::new(vec![1], vec![13.0]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample_store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_store()).unwrap();
        assert_eq!(&buf[..4], b"CL2O");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_store()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(short), Err(Error::Format(_))));
    }
}
