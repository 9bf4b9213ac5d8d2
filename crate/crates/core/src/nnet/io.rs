//! Versioned binary parameter files.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic   b"OLSTMPAR"
//! version u32
//! header  u64 length + UTF-8 JSON
//! blocks  u32 count, then per block:
//!         u32 name length + UTF-8 name, u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Each parameter contributes three blocks: `<name>`, `<name>#eg2` and
//! `<name>#edx2` (value and Adadelta state).

use std::io::{Read, Write};
use std::path::Path;

use super::param::Parameterized;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OLSTMPAR";
pub const VERSION: u32 = 1;

pub fn encode<M: Parameterized>(header: &str, model: &M) -> Vec<u8> {
    let mut blocks: Vec<(String, Tensor2)> = Vec::new();
    model.visit_params(&mut |name, p| {
        blocks.push((name.to_string(), p.value.clone()));
        blocks.push((format!("{name}#eg2"), p.sq_grad.clone()));
        blocks.push((format!("{name}#edx2"), p.sq_update.clone()));
    });

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parsed file: JSON header and named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamFile {
    pub header: String,
    pub blocks: Vec<(String, Tensor2)>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid("truncated parameter file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::invalid("non-UTF-8 string in parameter file"))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamFile> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::invalid("not a parameter file (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::invalid(format!("unsupported parameter file version {version}")));
    }
    let header_len = c.u64()? as usize;
    let header = c.string(header_len)?;
    let count = c.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let raw = c.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        blocks.push((name, Tensor2::from_vec(rows, cols, data)?));
    }
    if c.pos != buf.len() {
        return Err(Error::invalid("trailing bytes in parameter file"));
    }
    Ok(ParamFile { header, blocks })
}

impl ParamFile {
    /// Copies values and optimizer state into a model whose parameter names
    /// and shapes match the file.
    pub fn fill<M: Parameterized>(&self, model: &mut M) -> Result<()> {
        let lookup = |name: &str| self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let mut err = None;
        model.visit_params_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            let parts = [
                (name.to_string(), &mut p.value),
                (format!("{name}#eg2"), &mut p.sq_grad),
                (format!("{name}#edx2"), &mut p.sq_update),
            ];
            for (key, slot) in parts {
                match lookup(&key) {
                    Some(t) if t.shape() == slot.shape() => *slot = t.clone(),
                    Some(t) => {
                        err = Some(Error::shape(format!(
                            "block {key}: file {:?} vs model {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                        return;
                    }
                    None => {
                        err = Some(Error::invalid(format!("missing block {key}")));
                        return;
                    }
                }
            }
            p.zero_grad();
        });
        err.map_or(Ok(()), Err)
    }
}

pub fn save<M: Parameterized>(path: impl AsRef<Path>, header: &str, model: &M) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(header, model)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<ParamFile> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
