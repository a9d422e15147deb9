//! `A3WT` parameter files: magic, then per entry
//! `u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[..]`,
//! everything little-endian, entries until end of file.

use std::path::Path;

use crate::error::{Error, Result};

use super::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"A3WT";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f64>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                kind: "A3WT",
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
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
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.entries.push((name.into(), t));
    }

    pub fn push_params(&mut self, params: &ParamSet<f64>) {
        for (name, t) in params.iter() {
            let plain = Tensor::new(t.shape().to_vec(), t.values().to_vec()).unwrap();
            self.push(name, plain);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f64>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{name}`")))
    }

    /// Overwrites every parameter of `params` from same-named entries.
    pub fn load_params(&self, params: &mut ParamSet<f64>) -> Result<()> {
        for (name, t) in params.iter_mut() {
            let src = self.require(name)?;
            if src.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            t.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                kind: "A3WT",
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let mut entries = Vec::new();
        while r.pos < buf.len() {
            let at = r.pos as u64;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    kind: "A3WT",
                    offset: at,
                    msg: "name is not utf-8".into(),
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, "values")?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, values)?));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
