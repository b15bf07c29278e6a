//! `MDTS` binary tensor container.
//!
//! Layout: magic `MDTS`, `u32` version, `u8` dtype code, `u8` rank, one
//! `u64` per extent, then the raw payload. All integers and elements are
//! little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDTS";
pub const VERSION: u32 = 1;

/// Element payload of a container.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
    /// Full-precision extension used for checkpoints.
    F64(Vec<f64>),
}

impl Payload {
    pub fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 1,
            Payload::U32(_) => 2,
            Payload::F64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn width(code: u8) -> Option<usize> {
        match code {
            1 | 2 => Some(4),
            3 => Some(8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Container {
    pub fn new(shape: Vec<usize>, payload: Payload) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != payload.len() {
            return Err(Error::shape(
                "mdts",
                format!(
                    "extents {shape:?} hold {n} elements, payload has {}",
                    payload.len()
                ),
            ));
        }
        Ok(Self { shape, payload })
    }

    /// Stores a tensor at full precision.
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    /// Widens float payloads into a tensor; integer payloads are rejected.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::F64(v) => v.clone(),
            Payload::U32(_) => {
                return Err(Error::InvalidArgument(
                    "u32 container is not a float tensor".into(),
                ))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.payload.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(path, "magic", "expected `MDTS`"));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(
                path,
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let code = r.take(1, "dtype")?[0];
        let width = Payload::width(code)
            .ok_or_else(|| Error::format(path, "dtype", format!("unknown dtype code {code}")))?;
        let ndim = r.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = u64::from_le_bytes(r.take(8, "extents")?.try_into().unwrap());
            shape.push(
                usize::try_from(d)
                    .map_err(|_| Error::format(path, "extents", "extent overflows usize"))?,
            );
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(path, "extents", "element count overflows"))?;
        let expected = count
            .checked_mul(width)
            .ok_or_else(|| Error::format(path, "extents", "payload size overflows"))?;
        let remaining = bytes.len() - r.at;
        if remaining != expected {
            return Err(Error::format(
                path,
                "payload",
                format!("extents {shape:?} need {expected} bytes, found {remaining}"),
            ));
        }
        let raw = &bytes[r.at..];
        let payload = match code {
            1 => Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => Payload::U32(
                raw.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => Payload::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { shape, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::format(self.path, field, "file ends early"));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
}
