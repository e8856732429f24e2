//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "HEMB"                      4 bytes
//! version                     u32
//! config length, config text  u32, UTF-8
//! tensor count                u32
//! per tensor:
//!   name length, name         u32, UTF-8
//!   rank                      u8
//!   extents                   u64 × rank
//!   payload                   f64 × product(extents)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HEMB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(config: impl Into<String>, store: &ParamStore) -> Self {
        Self {
            config: config.into(),
            tensors: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Copies every tensor into `store`; names and shapes must match exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("model has no parameter `{name}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "`{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone())?;
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let payload: usize = ckpt.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + ckpt.config.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, ckpt.config.len(), "config length")?;
    out.extend_from_slice(ckpt.config.as_bytes());
    put_u32(&mut out, ckpt.tensors.len(), "tensor count")?;
    for (name, t) in &ckpt.tensors {
        put_u32(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("`{name}` has rank {}", t.rank())))?;
        out.push(rank);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated at byte {}: {what} needs {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a HEMB checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let config = r.text("config")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 12));
    for i in 0..count {
        let name = r.text("tensor name")?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = r.u64("extent")?;
            numel = numel.checked_mul(e).ok_or_else(|| {
                Error::Format(format!("tensor {i} `{name}`: extent product overflows"))
            })?;
            shape.push(
                usize::try_from(e).map_err(|_| Error::Format(format!("extent {e} too large")))?,
            );
        }
        let bytes_needed = numel
            .checked_mul(8)
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| Error::Format(format!("tensor {i} `{name}`: payload size overflows")))?;
        let raw = r.take(bytes_needed, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("tensor {i} `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
