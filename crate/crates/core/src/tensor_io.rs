//! The WFMT binary tensor format.
//!
//! Layout (little-endian): magic `WFMT`, `u32` version (1), `u32` dtype tag
//! (1 = f32, 2 = f64), `u32` rank in `1..=8`, `rank × u64` dims, then the
//! row-major payload. No padding and no footer.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"WFMT";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widens to f64 (exact for both dtypes).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// A shaped tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: TensorData::F64(data),
        }
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: TensorData::F32(data),
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Serialises a tensor to bytes.
pub fn encode(tensor: &RawTensor) -> Result<Vec<u8>> {
    let rank = tensor.shape.len();
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::shape(format!("rank must be in 1..=8, got {rank}")));
    }
    let count = element_count(&tensor.shape)
        .ok_or_else(|| Error::shape(format!("shape {:?} overflows", tensor.shape)))?;
    if count != tensor.data.len() {
        return Err(Error::shape(format!(
            "shape {:?} holds {count} elements, data has {}",
            tensor.shape,
            tensor.data.len()
        )));
    }
    let dtype = tensor.data.dtype();
    let mut out = Vec::with_capacity(16 + 8 * rank + count * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.tag().to_le_bytes());
    out.extend_from_slice(&(rank as u32).to_le_bytes());
    for &d in &tensor.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &tensor.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

/// Parses bytes produced by [`encode`]. Nothing is returned unless the whole buffer validates.
pub fn decode(bytes: &[u8]) -> std::result::Result<RawTensor, String> {
    fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format!("truncated file: need {n} bytes at offset {pos}"))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    }
    fn u32_at(bytes: &[u8], pos: &mut usize) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
    }

    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err("bad magic bytes (expected WFMT)".into());
    }
    let version = u32_at(bytes, &mut pos)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let tag = u32_at(bytes, &mut pos)?;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
    let rank = u32_at(bytes, &mut pos)? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(format!("rank {rank} outside 1..=8"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| format!("dimension {d} overflows"))?);
    }
    let count = element_count(&shape).ok_or_else(|| format!("shape {shape:?} overflows"))?;
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| format!("shape {shape:?} overflows"))?;
    let payload = take(bytes, &mut pos, payload_len)?;
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes after payload", bytes.len() - pos));
    }
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(RawTensor { shape, data })
}

pub fn write_tensor(path: &Path, tensor: &RawTensor) -> Result<()> {
    let bytes = encode(tensor)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

/// Reads a tensor and checks its shape, widening to f64.
pub fn read_f64_with_shape(path: &Path, expected: &[usize]) -> Result<Vec<f64>> {
    let t = read_tensor(path)?;
    if t.shape != expected {
        return Err(Error::format(
            path,
            format!("expected shape {expected:?}, found {:?}", t.shape),
        ));
    }
    Ok(t.data.to_f64())
}
