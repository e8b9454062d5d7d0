//! Binary tensor file format used for checkpointing, bit-exact by design.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                        |
//! |--------|------|------------------------------|
//! | 0      | 4    | magic `"SKVT"`               |
//! | 4      | 2    | version, u16 (currently 1)   |
//! | 6      | 1    | dtype code, u8 (1 = f32)     |
//! | 7      | 16   | shape (b, h, s, d) as 4×u32  |
//! | 23     | 4·n  | payload, row-major f32       |
//!
//! where `n` is the product of the shape.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SKVT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 23;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic at byte offset 0: expected \"SKVT\", got {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0} at byte offset 4")]
    BadVersion(u16),
    #[error("unsupported dtype code {0} at byte offset 6")]
    BadDtype(u8),
    #[error("truncated file: needed {needed} bytes from offset {offset}, got {got}")]
    Truncated { offset: usize, needed: usize, got: usize },
    #[error("trailing garbage: {extra} bytes past offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("payload length {len} does not match shape product {product}")]
    PayloadMismatch { len: usize, product: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rank-4 f32 tensor `(b, h, s, d)` with a bit-exact on-disk encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: [u32; 4],
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: [u32; 4], data: Vec<f32>) -> Result<Self, TensorFileError> {
        let product = shape.iter().map(|&x| x as usize).product();
        if data.len() != product {
            return Err(TensorFileError::PayloadMismatch { len: data.len(), product });
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        for dim in self.shape {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for value in &self.data {
            out.extend_from_slice(&value.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorFileError> {
        if bytes.len() < HEADER_LEN {
            return Err(TensorFileError::Truncated {
                offset: bytes.len(),
                needed: HEADER_LEN,
                got: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(TensorFileError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(TensorFileError::BadVersion(version));
        }
        let dtype = bytes[6];
        if dtype != DTYPE_F32 {
            return Err(TensorFileError::BadDtype(dtype));
        }
        let mut shape = [0u32; 4];
        for (i, dim) in shape.iter_mut().enumerate() {
            let at = 7 + 4 * i;
            *dim = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        }
        let product: usize = shape.iter().map(|&x| x as usize).product();
        let needed = product * 4;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < needed {
            return Err(TensorFileError::Truncated {
                offset: HEADER_LEN + payload.len(),
                needed,
                got: payload.len(),
            });
        }
        if payload.len() > needed {
            return Err(TensorFileError::TrailingBytes {
                offset: HEADER_LEN + needed,
                extra: payload.len() - needed,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn write_to(&self, mut writer: impl Write) -> Result<(), TensorFileError> {
        writer.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(mut reader: impl Read) -> Result<Self, TensorFileError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<(), TensorFileError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self, TensorFileError> {
        Self::decode(&std::fs::read(path)?)
    }
}
