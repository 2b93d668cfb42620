//! `FSDS` dataset files: magic, u32 version, u32 count, u32 dim, u8 label
//! flag, `count x dim` f32 values, then `count` u32 labels if flagged.

use std::collections::BTreeMap;
use std::path::Path;

use unisiam_core::data::{EpisodePool, Split};
use unisiam_core::Tensor;

use crate::bytes::{put_f32s, Reader};
use crate::error::{CliError, FormatError, Result};
use crate::io;

pub const MAGIC: &[u8; 4] = b"FSDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 17;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `count x dim`.
    pub vectors: Tensor,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(vectors: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(CliError::Config(format!("dataset vectors must be a matrix, got {:?}", vectors.shape())));
        }
        if labels.as_ref().is_some_and(|l| l.len() != vectors.rows()) {
            return Err(CliError::Config(format!("label count does not match {} vectors", vectors.rows())));
        }
        Ok(Self { vectors, labels })
    }

    /// Labeled pool `(vectors, global class ids)` of a split.
    pub fn from_pool(pool: &EpisodePool) -> Self {
        let (vectors, local) = pool.flatten();
        let labels = local.iter().map(|&c| pool.classes[c] as u32).collect();
        Self { vectors, labels: Some(labels) }
    }

    /// Group rows by label, classes in ascending label order.
    pub fn to_pool(&self, split: Split) -> Result<EpisodePool> {
        let labels = self.labels.as_ref().ok_or_else(|| CliError::Config("dataset has no labels".into()))?;
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let mut classes = Vec::new();
        let mut samples = Vec::new();
        for (label, rows) in groups {
            classes.push(label as usize);
            samples.push(self.vectors.select_rows(&rows)?);
        }
        Ok(EpisodePool::new(split, classes, samples)?)
    }
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let (n, d) = (ds.vectors.rows(), ds.vectors.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(ds.labels.is_some() as u8);
    put_f32s(&mut out, ds.vectors.data());
    if let Some(labels) = &ds.labels {
        for &l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader::new(buf);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let n = r.u32("count")? as usize;
    let d = r.u32("dim")? as usize;
    let at = r.pos();
    let labeled = match r.u8("label flag")? {
        0 => false,
        1 => true,
        f => return Err(FormatError::new(at, format!("label flag must be 0 or 1, got {}", f))),
    };
    let at = r.pos();
    let len = n.checked_mul(d).ok_or_else(|| FormatError::new(at, "payload size overflows"))?;
    let data = r.f32s(len, "vector payload")?;
    let labels = if labeled {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u32("labels")?);
        }
        Some(l)
    } else {
        None
    };
    r.finish()?;
    let vectors = Tensor::matrix(n, d, data).map_err(|e| FormatError::new(at, e.to_string()))?;
    Ok(Dataset { vectors, labels })
}

pub fn write(path: &Path, ds: &Dataset) -> Result<()> {
    io::write_atomic(path, &encode(ds))
}

pub fn read(path: &Path) -> Result<Dataset> {
    let buf = io::read(path)?;
    decode(&buf).map_err(|source| CliError::Format { path: path.to_path_buf(), source })
}
