//! FMLT binary tensor format.
//!
//! Layout: magic `b"FMLT"`, `u32` version (= 1), `u32` rank, `rank` × `u32`
//! dims, then `prod(dims)` little-endian `f32` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape};

pub const MAGIC: &[u8; 4] = b"FMLT";
pub const VERSION: u32 = 1;

/// A tensor of arbitrary rank as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!("dims {dims:?} imply {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn into_latent(self) -> Result<LatentTensor> {
        let [f, h, w, c]: [usize; 4] = self
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format(format!("expected rank 4 latent, got rank {}", self.dims.len())))?;
        LatentTensor::from_vec(Shape::new(f, h, w, c)?, self.data)
    }
}

impl From<&LatentTensor> for RawTensor {
    fn from(t: &LatentTensor) -> Self {
        Self { dims: t.shape().dims().to_vec(), data: t.data().to_vec() }
    }
}

pub fn encode(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<RawTensor> {
    let mut cur = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format(format!("truncated payload while reading {what}")));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4, "version")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = u32_at(take(4, "rank")?) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32_at(take(4, "dims")?) as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
    let payload = take(n.checked_mul(4).ok_or_else(|| Error::Format("payload too large".into()))?, "values")?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after payload", cur.len())));
    }
    Ok(RawTensor { dims, data })
}

pub fn write_to(mut w: impl Write, t: &RawTensor) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<RawTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save_latent(path: impl AsRef<Path>, t: &LatentTensor) -> Result<()> {
    fs::write(path, encode(&RawTensor::from(t)))?;
    Ok(())
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<LatentTensor> {
    decode(&fs::read(path)?)?.into_latent()
}
