//! Little-endian binary tensor records.
//!
//! Layout: magic `TNSR`, `u32` rank, `rank × u64` extents, `u8` dtype code,
//! then the raw elements.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
    U8 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U8),
            c => Err(TensorError::Format(format!("unknown dtype code {c}"))),
        }
    }
}

/// Decoded record payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Float(Tensor),
    Bytes { shape: Vec<usize>, data: Vec<u8> },
}

fn write_header<W: Write>(w: &mut W, shape: &[usize], dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    Ok(())
}

/// Writes `t` as `F64` or `F32`.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    write_header(w, t.shape(), dtype)?;
    match dtype {
        Dtype::F64 => {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Dtype::F32 => {
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Dtype::U8 => {
            return Err(TensorError::Format("float tensor cannot be written as u8".into()));
        }
    }
    Ok(())
}

pub fn write_bytes<W: Write>(w: &mut W, shape: &[usize], data: &[u8]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(TensorError::Format(format!(
            "shape {shape:?} does not match {} bytes",
            data.len()
        )));
    }
    write_header(w, shape, Dtype::U8)?;
    w.write_all(data)?;
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_record<R: Read>(r: &mut R) -> Result<Payload> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    if rank > 16 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r)?) as usize);
    }
    let dtype = Dtype::from_code(read_array::<_, 1>(r)?[0])?;
    let n: usize = shape.iter().product();
    match dtype {
        Dtype::F64 => {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Payload::Float(Tensor::new(shape, data)?))
        }
        Dtype::F32 => {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Ok(Payload::Float(Tensor::new(shape, data)?))
        }
        Dtype::U8 => {
            let mut data = vec![0u8; n];
            r.read_exact(&mut data)?;
            Ok(Payload::Bytes { shape, data })
        }
    }
}

/// Reads a floating-point record.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    match read_record(r)? {
        Payload::Float(t) => Ok(t),
        Payload::Bytes { .. } => Err(TensorError::Format("expected a float tensor, found u8".into())),
    }
}

pub fn read_bytes<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<u8>)> {
    match read_record(r)? {
        Payload::Bytes { shape, data } => Ok((shape, data)),
        Payload::Float(_) => Err(TensorError::Format("expected a u8 tensor, found float".into())),
    }
}
