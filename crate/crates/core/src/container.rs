//! Binary tensor container shared by checkpoints and embedding tables.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FTPG"                      magic
//! u32                         version (1)
//! u32                         tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u32 per dimension
//!   f64 per value, row-major
//! u32 text length, text bytes (UTF-8)   config echo or labels
//! u64                         round index
//! ```
//!
//! Files are parsed completely in memory before anything is returned.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTPG";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub text: String,
    pub round: u64,
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(c.tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in &c.tensors {
        out.extend_from_slice(&len_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.shape().len(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&len_u32(c.text.len(), "text length")?.to_le_bytes());
    out.extend_from_slice(c.text.as_bytes());
    out.extend_from_slice(&c.round.to_le_bytes());
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(start, format!("{what} is not UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"FTPG\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name = r.string("tensor name")?;
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::format(name_at, format!("duplicate tensor name `{name}`")));
        }
        let rank_at = r.pos;
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::format(rank_at, format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let values_at = r.pos;
        let numel = match numel {
            Some(n) if n.checked_mul(8).is_some_and(|b| b <= r.remaining()) => n,
            _ => {
                return Err(Error::format(
                    values_at,
                    format!("truncated: tensor `{name}` of shape {shape:?} does not fit in the file"),
                ))
            }
        };
        let raw = r.take(numel * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(rank_at, e.to_string()))?;
        tensors.push((name, t));
    }
    let text = r.string("text section")?;
    let round = r.u64("round index")?;
    if r.remaining() != 0 {
        return Err(Error::format(r.pos, format!("{} trailing bytes", r.remaining())));
    }
    Ok(Container { tensors, text, round })
}

pub fn write_file(path: &Path, c: &Container) -> Result<()> {
    let bytes = encode(c)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_file(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}
