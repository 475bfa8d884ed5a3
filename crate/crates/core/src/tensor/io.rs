//! The `TNSR` raw tensor file format.
//!
//! Layout: magic `TNSR`, version byte (1), dtype byte (1 = f32, 2 = f64),
//! rank byte, `rank` little-endian u32 extents, then row-major little-endian
//! values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: DType) -> Vec<u8> {
    let width = dtype.width();
    let mut out = Vec::with_capacity(7 + 4 * tensor.rank() + width * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it together with
/// the number of bytes consumed. `base` offsets reported byte positions.
pub fn decode_prefix(bytes: &[u8], base: usize) -> Result<(Tensor, usize)> {
    let need = |at: usize, n: usize, what: &str| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::format(base + bytes.len(), format!("truncated {what}")))
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::format(base, "bad magic, expected TNSR"));
    }
    need(4, 3, "header")?;
    if bytes[4] != VERSION {
        return Err(Error::format(base + 4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        1 => DType::F32,
        2 => DType::F64,
        other => return Err(Error::format(base + 5, format!("unknown dtype code {other}"))),
    };
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(Error::format(base + 6, "rank must be at least 1"));
    }
    need(7, 4 * rank, "extents")?;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 7 + 4 * i;
        let e = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        if e == 0 {
            return Err(Error::format(base + at, "zero extent"));
        }
        shape.push(e);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format(base + 7, "extent product overflows"))?;
    let start = 7 + 4 * rank;
    let width = dtype.width();
    let payload = count
        .checked_mul(width)
        .ok_or_else(|| Error::format(base + 7, "payload size overflows"))?;
    need(start, payload, "data")?;
    let raw = &bytes[start..start + payload];
    let data: Vec<f64> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((Tensor::new(&shape, data)?, start + payload))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(used, "trailing bytes after tensor data"));
    }
    Ok(t)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: impl AsRef<Path>, tensor: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(tensor, dtype))
        .map_err(|e| Error::io(path, e))
}
