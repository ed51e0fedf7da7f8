//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PPJCKPT\0"
//! version  u32      = 1
//! count    u64      number of parameters
//! repeated count times:
//!   name_len u32, name (utf-8), ndim u32, dims u64 x ndim,
//!   values   f64 x product(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PPJCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.ndim() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                record: self.record,
                field: field.into(),
                message: "unexpected end of checkpoint".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        record: 0,
    };
    let parse = |record, field: &str, message: String| Error::Parse {
        record,
        field: field.into(),
        message,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(parse(0, "magic", "not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(parse(0, "version", format!("unsupported version {version}")));
    }
    let count = r.u64("count")? as usize;
    let mut store = ParamStore::new();
    for i in 0..count {
        r.record = i;
        let len = r.u32("name_len")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| parse(i, "name", e.to_string()))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| parse(i, "dims", e.to_string()))?;
        store
            .insert(name, t)
            .map_err(|e| parse(i, "name", e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(parse(count, "trailer", "trailing bytes after last record".into()));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
