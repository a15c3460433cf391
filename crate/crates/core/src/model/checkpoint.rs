//! Versioned binary container shared by every trainable surrogate.
//!
//! Layout (little endian): magic `AUXBO-MODEL`, `u32` version, `u8` kind,
//! `u32`-prefixed JSON header, `u32` parameter count, then per parameter a
//! `u32`-prefixed name, `u32` rank, `u64` extents and raw `f64` data.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 11] = b"AUXBO-MODEL";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Transformer,
    DeepKernelGp,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Transformer => 1,
            ModelKind::DeepKernelGp => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Transformer),
            2 => Some(ModelKind::DeepKernelGp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "tnp",
            ModelKind::DeepKernelGp => "dgp",
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error("model file holds a {found} model, expected {expected}")]
    KindMismatch { expected: &'static str, found: &'static str },
    #[error("configuration conflict: {0}")]
    ConfigConflict(String),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

/// Raw contents of a model file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub header: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 11];
        if r.read_exact(&mut magic).is_err() {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let tag = read_bytes(&mut r, 1)?[0];
        let kind = ModelKind::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("unknown model kind {tag}")))?;
        let header_len = read_u32(&mut r)? as usize;
        let header_bytes = read_bytes(&mut r, header_len)?;
        let header = serde_json::from_slice(&header_bytes).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!("parameter {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or(CheckpointError::Truncated)?;
            let raw = read_bytes(&mut r, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.find(&name).is_some() {
                return Err(CheckpointError::Corrupt(format!("parameter {name} appears twice")));
            }
            params.add(name, Tensor::new(shape, data));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes after the last parameter".into()));
        }
        Ok(Checkpoint { kind, header, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Copies every stored parameter into `target`, which must have exactly
    /// the same names and shapes.
    pub fn restore_into(&self, target: &mut ParamStore) -> Result<(), CheckpointError> {
        if target.len() != self.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} parameters, found {}",
                target.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = target.ids().collect();
        for id in ids {
            let name = target.name(id).to_string();
            let stored = self
                .params
                .find(&name)
                .map(|i| self.params.get(i))
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing parameter {name}")))?;
            if stored.shape() != target.get(id).shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    target.get(id).shape()
                )));
            }
            *target.get_mut(id) = stored.clone();
        }
        Ok(())
    }
}

fn read_bytes(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(CheckpointError::Truncated);
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
    Ok(buf)
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(read_bytes(r, 8)?.try_into().unwrap()))
}
