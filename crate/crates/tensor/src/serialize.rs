//! Binary tensor records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "PMTW"            4 bytes
//! version                  u8
//! count                    u32
//! count × record:
//!   name_len u32, name (utf-8)
//!   dtype tag u8 (0 = f32, 1 = f64)
//!   rank u32, rank × extent u64
//!   numel × scalar (little-endian)
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PMTW";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("record {name}: stored as {found}, expected {expected}")]
    DType {
        name: String,
        found: &'static str,
        expected: &'static str,
    },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("parameter {name}: stored extents {stored:?}, model expects {expected:?}")]
    Extents {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
}

pub fn write_tensors<F: Real, W: Write>(out: &mut W, records: &[(&str, &Tensor<F>)]) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(F::DTYPE.tag());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.extend_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors<F: Real, R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<F>)>, FormatError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::Magic(magic));
    }
    let version = read_u8(input)?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let count = read_u32(input)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        if name_len > 1 << 16 {
            return Err(FormatError::Malformed(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let tag = read_u8(input)?;
        let dtype = DType::from_tag(tag).ok_or_else(|| FormatError::Malformed(format!("dtype tag {tag}")))?;
        if dtype != F::DTYPE {
            return Err(FormatError::DType {
                name,
                found: dtype.name(),
                expected: F::DTYPE.name(),
            });
        }
        let rank = read_u32(input)? as usize;
        if rank > 16 {
            return Err(FormatError::Malformed(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * dtype.size()];
        input.read_exact(&mut raw)?;
        let data = raw.chunks(dtype.size()).map(F::from_le).collect();
        let t = Tensor::new(&shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_store<F: Real, W: Write>(out: &mut W, store: &ParamStore<F>) -> Result<(), FormatError> {
    let records: Vec<(&str, &Tensor<F>)> = store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    write_tensors(out, &records)
}

/// Overwrite every entry of `store` from `records`, matching by name.
/// Extents must agree exactly.
pub fn load_into_store<F: Real>(store: &mut ParamStore<F>, records: Vec<(String, Tensor<F>)>) -> Result<(), FormatError> {
    let ids: Vec<_> = store.ids().collect();
    let mut by_name: std::collections::HashMap<String, Tensor<F>> = records.into_iter().collect();
    let mut mismatches = Vec::new();
    for id in &ids {
        let name = store.get(*id).name.clone();
        match by_name.get(&name) {
            None => return Err(FormatError::Missing(name)),
            Some(t) if t.shape() != store.value(*id).shape() => {
                mismatches.push(FormatError::Extents {
                    name,
                    stored: t.shape().to_vec(),
                    expected: store.value(*id).shape().to_vec(),
                });
            }
            _ => {}
        }
    }
    if let Some(first) = mismatches.into_iter().next() {
        return Err(first);
    }
    for id in ids {
        let name = store.get(id).name.clone();
        *store.value_mut(id) = by_name.remove(&name).expect("checked above");
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, FormatError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
