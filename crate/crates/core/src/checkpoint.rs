//! Binary model checkpoints.
//!
//! Layout: the text line `SADV1 <descriptor>\n`, then for every parameter in
//! architecture order a little-endian `u32` name length, the name bytes, a
//! `u32` rank, `u32` extents and the values as little-endian `f64`s.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::tensor::Tensor;

const MAGIC: &str = "SADV1";

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = format!("{MAGIC} {}\n", model.descriptor()).into_bytes();
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| err("header is not text".into()))?;
    let descriptor = header
        .strip_prefix(MAGIC)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| err(format!("header must start with {MAGIC:?}")))?;
    let (arch, range) = Architecture::parse_descriptor(descriptor)?;
    let mut r = Reader {
        buf: bytes,
        pos: newline + 1,
    };
    let truncated = || err("truncated checkpoint".into());
    let mut params = Vec::new();
    for _ in 0..arch.parameter_shapes()?.len() {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| err("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_parts(arch, range, params)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    from_bytes(&fs::read(path)?, path)
}
