//! Flat binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"DJTD"
//! version  u32
//! repeated until end of file:
//!   name_len  u32, name (UTF-8)
//!   gate      u8
//!   count     u32
//!   count x tensor:
//!     ndim u32, ndim x u64 dims, product(dims) x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::params::{Gate, ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DJTD";
pub const VERSION: u32 = 1;

pub fn write_header(out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
}

pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(groups: &[ParamGroup]) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out);
    for g in groups {
        out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
        out.extend_from_slice(g.name.as_bytes());
        out.push(g.gate.code());
        out.extend_from_slice(&(g.params.len() as u32).to_le_bytes());
        for p in &g.params {
            write_tensor(&mut out, p);
        }
    }
    out
}

/// Cursor over an encoded buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic and version.
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        Ok(r)
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<ParamGroup>> {
    let mut r = Reader::new(buf)?;
    let mut groups = Vec::new();
    while !r.at_end() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("group name is not UTF-8".into()))?
            .to_string();
        let gate = Gate::from_code(r.u8()?)?;
        let count = r.u32()? as usize;
        let params = (0..count)
            .map(|_| r.tensor().map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        groups.push(ParamGroup {
            name,
            gate,
            names: Vec::new(),
            params,
        });
    }
    Ok(groups)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    write_file(path, &encode(store.groups()))
}

/// Loads a checkpoint into `store`, which must have the same layout.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let groups = decode(&read_file(path)?)?;
    store.replace_groups(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        let a = s.add_group("encoder", Gate::EncoderStack);
        let b = s.add_group("ctx", Gate::FixedContextB);
        s.add(a, "w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        s.add(a, "b", Tensor::scalar(-7.25));
        s.add(b, "c", Tensor::zeros(&[1, 3]));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode(s.groups());
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        for (g, h) in s.groups().iter().zip(&back) {
            assert_eq!(g.name, h.name);
            assert_eq!(g.gate, h.gate);
            for (p, q) in g.params.iter().zip(&h.params) {
                assert!(p.bit_eq(q));
            }
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[]);
        assert_eq!(&bytes[..4], b"DJTD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(bytes.len(), 8);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(sample().groups());
        bytes[4] = 99;
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 99, .. })));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = encode(sample().groups());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn unknown_gate_code_is_an_error() {
        let s = sample();
        let mut bytes = encode(&s.groups()[..1]);
        // header(8) + name_len(4) + "encoder"(7) -> gate byte
        bytes[19] = 200;
        assert!(matches!(decode(&bytes), Err(Error::UnknownGate(_))));
    }
}
