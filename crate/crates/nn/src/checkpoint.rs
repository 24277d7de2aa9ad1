//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"PFNN"
//! version    u32
//! n_meta     u32, then n_meta x (key: u32 len + utf8, value: u32 len + utf8)
//! n_params   u32, then n_params x (name: u32 len + utf8, trainable: u8, ndim: u32, dims: ndim x u32)
//! payload    every parameter's values as f32, in manifest order
//! checksum   u32 CRC-32 of all preceding bytes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(params: ParamStore<T>) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            put_str(&mut out, &p.name);
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, p) in self.params.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(NnError::Checkpoint("file too short".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(NnError::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let trainable = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, trainable, dims));
        }
        let mut params = ParamStore::new();
        for (name, trainable, dims) in manifest {
            let len: usize = dims.iter().product();
            let raw = r.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            let t = Tensor::new(&dims, data)?;
            if trainable {
                params.add(name, t);
            } else {
                params.add_buffer(name, t);
            }
        }
        if r.pos != body.len() {
            return Err(NnError::Checkpoint("trailing bytes before checksum".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| NnError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnError::Checkpoint("invalid utf-8".into()))
    }
}
