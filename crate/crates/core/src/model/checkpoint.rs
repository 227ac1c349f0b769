// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "APCK" | format_version: u32 | config_len: u32 | config JSON (UTF-8)
//! repeated until EOF:
//!   name_len: u16 | name bytes | rank: u8 | dims: u32 * rank | f32 data (row-major)
//! ```

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let mut out = Vec::with_capacity(16 + config.len() + model.n_params() * 4 + 64 * model.param_entries().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for e in model.param_entries() {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.shape.len() as u8);
        for &dim in &e.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &model.params()[e.offset..e.offset + e.len()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format_version {version}")));
    }
    let clen = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(clen)?)?;
    let mut model = Model::zeroed(config)?;
    let entries = model.param_entries().to_vec();
    let mut seen = 0usize;
    while !r.done() {
        let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let entry = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?} does not match config {:?}",
                entry.shape
            )));
        }
        let data = r.take(entry.len() * 4)?;
        let dst = &mut model.params_mut()[entry.offset..entry.offset + entry.len()];
        for (d, chunk) in dst.iter_mut().zip(data.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        seen += 1;
    }
    if seen != entries.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter arrays, found {seen}",
            entries.len()
        )));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
