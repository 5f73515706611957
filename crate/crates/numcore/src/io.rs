//! MGT1 tensor files.
//!
//! Layout: magic `MGT1`, one dtype byte (1 = f32, 2 = f64), one byte holding
//! the rank, `rank` little-endian u64 dimensions, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.ndim() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE_TAG);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing MGT1 magic".into()));
    }
    if bytes[4] != T::DTYPE_TAG {
        return Err(Error::Format(format!(
            "dtype tag {} does not match requested tag {}",
            bytes[4],
            T::DTYPE_TAG
        )));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[6 + 8 * i..14 + 8 * i]);
            u64::from_le_bytes(b) as usize
        })
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * T::BYTES {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * T::BYTES
        )));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}
