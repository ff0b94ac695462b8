//! Versioned checkpoint container: a metadata JSON block followed by named
//! f64 tensors.
//!
//! Layout: magic "LVCK", u16 version, u64 metadata length + UTF-8 JSON, u32
//! tensor count, then per tensor: u32 name length + name, u8 dtype, u8 rank,
//! u64 extents, little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LVCK";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

/// In-memory checkpoint: metadata JSON plus ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta.as_bytes();
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(DTYPE_F64);
            buf.push(t.shape().len() as u8);
            for &e in t.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC.as_slice() {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let meta = String::from_utf8(cur.take(meta_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("unknown dtype code {dtype}")));
            }
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
