//! Binary tensor file (`SPTN`) and named-tensor container (`SCMB`).
//!
//! All integers and payloads are little-endian.
//!
//! `SPTN` tensor file:
//!
//! ```text
//! magic  "SPTN"
//! u8     dtype        0 = f32, 1 = i32
//! u8     ndim
//! u32    dims[ndim]
//! ...    payload      product(dims) elements, row-major
//! ```
//!
//! `SCMB` named-tensor container:
//!
//! ```text
//! magic  "SCMB"
//! u32    count
//! count x {
//!   u32    name_len
//!   u8     name[name_len]   UTF-8
//!   u8     dtype            0 = f32
//!   u8     ndim
//!   u32    dims[ndim]
//!   f32    payload[product(dims)]
//! }
//! u8     sha256[32]         hash of every preceding byte
//! ```
//!
//! Writers emit container entries in ascending name order.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"SPTN";
pub const CONTAINER_MAGIC: &[u8; 4] = b"SCMB";
pub const HASH_LEN: usize = 32;

const MAX_NDIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unexpected end of data while reading {what}")]
    Truncated { what: &'static str },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("too many dimensions: {0}")]
    TooManyDims(usize),
    #[error("element count overflows")]
    ShapeOverflow,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("container content hash mismatch")]
    HashMismatch,
    #[error("expected {expected} tensor, found {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I32(_) => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I32(_) => "i32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: TensorData::I32(data),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], FormatError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(FormatError::WrongDtype {
                expected: "f32",
                found: other.name(),
            }),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32], FormatError> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(FormatError::WrongDtype {
                expected: "i32",
                found: other.name(),
            }),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn shape(&mut self) -> Result<(Vec<usize>, usize), FormatError> {
        let ndim = self.u8("ndim")? as usize;
        if ndim > MAX_NDIM {
            return Err(FormatError::TooManyDims(ndim));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let d = self.u32("dims")? as usize;
            count = count.checked_mul(d).ok_or(FormatError::ShapeOverflow)?;
            shape.push(d);
        }
        Ok((shape, count))
    }

    fn payload(&mut self, dtype: u8, count: usize) -> Result<TensorData, FormatError> {
        let bytes = count.checked_mul(4).ok_or(FormatError::ShapeOverflow)?;
        if bytes > self.remaining() {
            return Err(FormatError::Truncated { what: "payload" });
        }
        let raw = self.take(bytes, "payload")?;
        let words = raw.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
        Ok(match dtype {
            0 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            1 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
            other => return Err(FormatError::UnsupportedDtype(other)),
        })
    }
}

fn write_shape_and_payload(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.data.code());
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

pub fn write_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape.len() + 4 * t.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    write_shape_and_payload(&mut out, t);
    out
}

pub fn read_tensor(buf: &[u8]) -> Result<Tensor, FormatError> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(FormatError::BadMagic { expected: "SPTN" });
    }
    let dtype = r.u8("dtype")?;
    if dtype > 1 {
        return Err(FormatError::UnsupportedDtype(dtype));
    }
    let (shape, count) = r.shape()?;
    let data = r.payload(dtype, count)?;
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()));
    }
    Ok(Tensor { shape, data })
}

pub fn content_hash(bytes: &[u8]) -> [u8; HASH_LEN] {
    Sha256::digest(bytes).into()
}

/// Serializes a container; returns the bytes and the content hash they end with.
pub fn write_container(tensors: &BTreeMap<String, Tensor>) -> (Vec<u8>, [u8; HASH_LEN]) {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        assert!(
            matches!(t.data, TensorData::F32(_)),
            "container tensors are f32"
        );
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_shape_and_payload(&mut out, t);
    }
    let hash = content_hash(&out);
    out.extend_from_slice(&hash);
    (out, hash)
}

/// Parses a container and verifies its trailing hash.
pub fn read_container(
    buf: &[u8],
) -> Result<(BTreeMap<String, Tensor>, [u8; HASH_LEN]), FormatError> {
    if buf.len() < 4 + 4 + HASH_LEN {
        return Err(FormatError::Truncated { what: "container" });
    }
    let (body, stored) = buf.split_at(buf.len() - HASH_LEN);
    let mut r = Reader::new(body);
    if r.take(4, "magic")? != CONTAINER_MAGIC {
        return Err(FormatError::BadMagic { expected: "SCMB" });
    }
    if content_hash(body).as_slice() != stored {
        return Err(FormatError::HashMismatch);
    }
    let count = r.u32("count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| FormatError::InvalidName)?
            .to_owned();
        let dtype = r.u8("dtype")?;
        if dtype != 0 {
            return Err(FormatError::UnsupportedDtype(dtype));
        }
        let (shape, n) = r.shape()?;
        let data = r.payload(dtype, n)?;
        if tensors.contains_key(&name) {
            return Err(FormatError::DuplicateName(name));
        }
        tensors.insert(name, Tensor { shape, data });
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()));
    }
    let mut hash = [0u8; HASH_LEN];
    hash.copy_from_slice(stored);
    Ok((tensors, hash))
}
