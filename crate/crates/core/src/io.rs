//! `MTSR` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | field                          |
//! |------------|--------------------------------|
//! | 4          | magic `b"MTSR"`                |
//! | 1          | version, `1`                   |
//! | 1          | dtype, `0` = f32               |
//! | 2          | reserved, `0`                  |
//! | 4          | `ndim` (u32)                   |
//! | 8 * ndim   | dims (u64 each)                |
//! | 4 * numel  | row-major f32 payload          |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"MTSR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Corrupt(format!("truncated {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor<f32>> {
    let b = &mut bytes;
    let magic: [u8; 4] = take(b, 4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = take(b, 1, "version")?[0];
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = take(b, 1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::BadDtype(dtype));
    }
    let reserved = u16::from_le_bytes(take(b, 2, "header")?.try_into().expect("2 bytes"));
    if reserved != 0 {
        return Err(Error::Corrupt(format!("reserved field is {reserved}")));
    }
    let ndim = u32::from_le_bytes(take(b, 4, "header")?.try_into().expect("4 bytes")) as usize;
    if ndim == 0 || ndim > MAX_RANK {
        return Err(Error::Corrupt(format!("rank {ndim} outside 1..={MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(b, 8, "dims")?.try_into().expect("8 bytes"));
        let d = usize::try_from(d).map_err(|_| Error::Corrupt(format!("extent {d} too large")))?;
        if d == 0 {
            return Err(Error::Corrupt("zero extent".into()));
        }
        numel = numel.checked_mul(d).ok_or_else(|| Error::Corrupt("element count overflows".into()))?;
        dims.push(d);
    }
    let expected = numel.checked_mul(4).ok_or_else(|| Error::Corrupt("payload size overflows".into()))?;
    if b.len() != expected {
        return Err(Error::Corrupt(format!("payload is {} bytes, dims {dims:?} need {expected}", b.len())));
    }
    let data = b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(&dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
