//! Parameter archives.
//!
//! Layout (little-endian): 8-byte magic, u32 version, u32 entry count, then
//! per entry a u32 name length, UTF-8 name, u32 rank, u64 dims and f64
//! payload, and finally a u64 length plus a JSON metadata document.

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EGSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f64>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new<S: Scalar>(params: &ParamStore<S>, meta: serde_json::Value) -> Self {
        Self {
            params: params.cast(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.params.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}`: shape overflows")))?;
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("`{name}`: shape overflows")))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.contains(&name) {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after metadata".into()));
        }
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies the stored values into `target`, which must hold exactly the
    /// same names and shapes.
    pub fn restore_into<S: Scalar>(&self, target: &mut ParamStore<S>) -> Result<()> {
        let mut errs = Vec::new();
        for name in target.names() {
            if !self.params.contains(name) {
                errs.push(format!("checkpoint lacks parameter `{name}`"));
            }
        }
        for (name, t) in self.params.iter() {
            match target.get(name) {
                Err(_) => errs.push(format!("checkpoint has unexpected parameter `{name}`")),
                Ok(cur) if cur.shape() != t.shape() => errs.push(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    cur.shape()
                )),
                Ok(_) => {}
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        for (name, t) in self.params.iter() {
            *target.get_mut(name)? = t.cast();
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
