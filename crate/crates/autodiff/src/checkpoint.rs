//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GFK1"  version:u32
//! repeated until EOF:
//!     name_len:u32  name:[u8; name_len]  (UTF-8)
//!     rank:u32      extents:[u64; rank]
//!     values:[f64; product(extents)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GFK1";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 16;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TensorError::Checkpoint(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while c.remaining() > 0 {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?
            .to_owned();
        if store.find(&name).is_some() {
            return Err(TensorError::Checkpoint(format!("duplicate parameter {name}")));
        }
        let rank = c.u32("rank")?;
        if rank > MAX_RANK {
            return Err(TensorError::Checkpoint(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for _ in 0..rank {
            let e = usize::try_from(c.u64("extent")?)
                .map_err(|_| TensorError::Checkpoint("extent overflows usize".into()))?;
            count = count
                .checked_mul(e)
                .ok_or_else(|| TensorError::Checkpoint("element count overflows".into()))?;
            shape.push(e);
        }
        let nbytes = count
            .checked_mul(8)
            .filter(|&n| n <= c.remaining())
            .ok_or_else(|| TensorError::Checkpoint(format!("truncated values of {name}")))?;
        let raw = c.take(nbytes, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.push_raw(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5));
        s.add("b", Tensor::scalar(-1.25));
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"GFK1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(&bytes[12..20], b"a.weight");
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 2);
    }

    #[test]
    fn roundtrip() {
        let s = sample();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"").is_err());
        assert!(decode(b"GFK2\x01\0\0\0").is_err());
        let mut bytes = encode(&sample());
        bytes.truncate(bytes.len() - 3);
        assert!(decode(&bytes).is_err());
        // huge extent must not allocate
        let mut evil = b"GFK1\x01\0\0\0\x01\0\0\0x\x01\0\0\0".to_vec();
        evil.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&evil).is_err());
    }
}
