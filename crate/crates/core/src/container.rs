//! Binary dense-matrix container.
//!
//! Layout: magic `VFT1`, little-endian `u32` row count, `u32` column count,
//! `u8` dtype tag, then the row-major payload. Tag `0` is 32-bit float; tag
//! `1` is 64-bit float (used for checkpoints, where round-trips must be exact).

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VFT1";
const HEADER_LEN: usize = 4 + 4 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(matrix: &Array2<f64>, dtype: Dtype) -> Result<Vec<u8>> {
    let (rows, cols) = matrix.dim();
    let (rows32, cols32) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => return Err(Error::format("matrix container", "dimensions exceed u32")),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    out.push(dtype as u8);
    for &v in matrix.iter() {
        if !v.is_finite() {
            return Err(Error::Numeric("refusing to serialize a non-finite value".into()));
        }
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Array2<f64>, Dtype)> {
    let bad = |m: &str| Error::format("matrix container", m);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing VFT1 header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dtype = match bytes[12] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        tag => return Err(bad(&format!("unknown dtype tag {tag}"))),
    };
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != rows * cols * dtype.width() {
        return Err(bad("payload length does not match header"));
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let matrix = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))?;
    Ok((matrix, dtype))
}

pub fn write(path: &Path, matrix: &Array2<f64>, dtype: Dtype) -> Result<()> {
    crate::io::write_atomic(path, &encode(matrix, dtype)?)
}

pub fn read(path: &Path) -> Result<(Array2<f64>, Dtype)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        other => other,
    })
}
