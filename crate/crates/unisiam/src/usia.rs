//! `USIA` checkpoint files.
//!
//! Layout (little-endian): magic `USIA`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and the
//! f32 payload; finally a u32-prefixed UTF-8 metadata block describing the
//! architecture.

use std::path::Path;

use unisiam_core::models::EncoderStack;
use unisiam_core::Tensor;

use crate::bytes::{put_f32s, Reader};
use crate::error::{FormatError, Result};
use crate::io;

pub const MAGIC: &[u8; 4] = b"USIA";
pub const VERSION: u32 = 1;

pub fn encode(stack: &EncoderStack) -> Vec<u8> {
    let tensors = stack.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    let meta = stack.metadata();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out
}

pub fn decode(buf: &[u8]) -> Result<EncoderStack, FormatError> {
    let mut r = Reader::new(buf);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos();
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| FormatError::new(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let at = r.pos();
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| FormatError::new(at, "tensor too large"))?;
        let data = r.f32s(n, "tensor payload")?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError::new(at, e.to_string()))?;
        tensors.push((name, t));
    }
    let len = r.u32("metadata length")? as usize;
    let at = r.pos();
    let meta = std::str::from_utf8(r.take(len, "metadata")?).map_err(|_| FormatError::new(at, "metadata is not UTF-8"))?;
    r.finish()?;
    EncoderStack::from_parts(meta, tensors).map_err(|e| FormatError::new(at, e.to_string()))
}

pub fn save(stack: &EncoderStack, path: &Path) -> Result<()> {
    io::write_atomic(path, &encode(stack))
}

pub fn load(path: &Path) -> Result<EncoderStack> {
    let buf = io::read(path)?;
    decode(&buf).map_err(|source| crate::CliError::Format { path: path.to_path_buf(), source })
}
