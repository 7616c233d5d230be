//! Binary tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DEERTNSR"
//! version  u32      1
//! count    u64
//! count times:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims u64 * rank
//!   data     f32 * product(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DEERTNSR";
pub const VERSION: u32 = 1;

pub fn write<F: Float, W: Write>(mut w: W, tensors: &[(String, Tensor<F>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(TensorError::Format("truncated archive".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn u32_at(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()))
}

fn u64_at(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().unwrap()))
}

/// Parses a whole archive; trailing bytes are an error.
pub fn parse<F: Float>(bytes: &[u8]) -> Result<Vec<(String, Tensor<F>)>> {
    let mut buf = bytes;
    if take(&mut buf, 8)? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = u32_at(&mut buf)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = u64_at(&mut buf)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32_at(&mut buf)? as usize;
        let name = std::str::from_utf8(take(&mut buf, len)?)
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = u32_at(&mut buf)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64_at(&mut buf)? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| TensorError::Format(format!("tensor {name} larger than archive")))?;
        let raw = take(&mut buf, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| F::from_f64c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    if !buf.is_empty() {
        return Err(TensorError::Format(format!("{} trailing bytes", buf.len())));
    }
    Ok(out)
}

pub fn read<F: Float, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<F>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn save<F: Float>(path: impl AsRef<Path>, tensors: &[(String, Tensor<F>)]) -> Result<()> {
    write(BufWriter::new(File::create(path)?), tensors)
}

pub fn load<F: Float>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<F>)>> {
    read(BufReader::new(File::open(path)?))
}
