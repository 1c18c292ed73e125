//! Versioned binary checkpoint archive.
//!
//! Layout (little endian):
//!
//! ```text
//! "SSPSD1"                      magic / format version
//! u64 step
//! u64 len, [u8; len]            JSON metadata (model + training config, bookkeeping)
//! u32 section count
//!   u32 len, name               e.g. "student", "teacher", "adam.m", "adam.v"
//!   u32 array count
//!     u32 len, name
//!     u32 ndim, u64 dims[ndim]
//!     f64 data[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{ModelParams, NamedArray};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"SSPSD1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: Value,
    pub sections: Vec<(String, ModelParams)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&ModelParams> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("JSON values always serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, params) in &self.sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(params.arrays.len() as u32).to_le_bytes());
            for a in &params.arrays {
                put_str(&mut out, &a.name);
                out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
                for d in &a.shape {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in &a.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("bad magic, not an SSPSD1 checkpoint".into());
        }
        let step = r.u64()?;
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = r.string()?;
            let n_arrays = r.u32()?;
            let mut arrays = Vec::new();
            for _ in 0..n_arrays {
                let array_name = r.string()?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
                let count: usize = shape.iter().product();
                let raw = r.take(count.checked_mul(8).ok_or("array too large")?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                arrays.push(NamedArray {
                    name: array_name,
                    shape,
                    data,
                });
            }
            sections.push((name, ModelParams { arrays }));
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after last section".into());
        }
        Ok(Self { step, meta, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}
