//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "TITW"
//! version   u8       1
//! meta_len  u32      length of the metadata block
//! meta      bytes    UTF-8 text, empty for bare weight files
//! count     u32      number of records
//! record*   name_len u16, name (UTF-8), ndim u8, dims u32 × ndim,
//!           payload f32 × product(dims), row-major
//! ```
//!
//! Records appear in parameter-store order. Values are stored as `f32`, so
//! an `f32` store round-trips bit-exactly.

use std::io::{Read, Write};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Result, TitError};

pub const MAGIC: &[u8; 4] = b"TITW";
pub const VERSION: u8 = 1;

pub fn write_weights<T: Scalar, W: Write>(
    w: &mut W,
    store: &ParamStore<T>,
    meta: &str,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| TitError::Format(format!("parameter name too long: {}", p.name)))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a weight file into a fresh store, returning it with the metadata
/// text.
pub fn read_weights<T: Scalar, R: Read>(r: &mut R) -> Result<(ParamStore<T>, String)> {
    if &read_exact::<_, 4>(r)? != MAGIC {
        return Err(TitError::Format("not a weight file (bad magic)".into()));
    }
    let [version] = read_exact::<_, 1>(r)?;
    if version != VERSION {
        return Err(TitError::Format(format!(
            "unsupported weight file version {version}"
        )));
    }
    let meta_len = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta =
        String::from_utf8(meta).map_err(|_| TitError::Format("metadata is not UTF-8".into()))?;
    let count = u32::from_le_bytes(read_exact(r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| TitError::Format("name is not UTF-8".into()))?;
        let [ndim] = read_exact::<_, 1>(r)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok((store, meta))
}
