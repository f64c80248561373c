//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "NRNMCKPT"
//! version   u32      1
//! precision u8       4 (f32) or 8 (f64)
//! count     u32      number of parameters
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   rank     u8, dims (u64 each)
//!   values   product(dims) scalars, row-major, little-endian IEEE-754
//! ```
//!
//! Values are stored as raw bits, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"NRNMCKPT";
const VERSION: u32 = 1;

pub fn encode<T: Real>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.scalar_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let width = r.u8()? as usize;
    if width != T::BYTES {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {}-byte scalars, expected {} ({})",
            width,
            T::BYTES,
            T::PRECISION
        )));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save<T: Real>(path: &Path, params: &ParamSet<T>) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<ParamSet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Precision tag of a stored checkpoint, without decoding the values.
pub fn stored_precision(path: &Path) -> Result<crate::tensor::Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match bytes.get(12) {
        Some(4) if bytes.starts_with(MAGIC) => Ok(crate::tensor::Precision::F32),
        Some(8) if bytes.starts_with(MAGIC) => Ok(crate::tensor::Precision::F64),
        _ => Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display()))),
    }
}
