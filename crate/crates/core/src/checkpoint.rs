//! Versioned binary container of named parameter tensors plus the
//! configuration that built them.
//!
//! Layout (little-endian): magic `EMGSECKP`, u32 version, u32 kind length +
//! kind, u64 config length + `key=value` text, u64 tensor count, then per
//! tensor: u32 name length + name, u32 rank, u64 per dimension, f32 values.

use crate::kv::{KvError, KvMap};
use crate::tensor::{ParamStore, Scalar};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EMGSECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not fit this model: {0}")]
    Mismatch(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] KvError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: KvMap,
    pub tensors: Vec<NamedTensor>,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Format("truncated file".into())
        } else {
            CheckpointError::Io(e)
        }
    })?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    if len > 1 << 24 {
        return Err(CheckpointError::Format(format!(
            "implausible string length {len}"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Format("string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(kind: &str, config: KvMap, store: &ParamStore<T>) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self {
            kind: kind.to_string(),
            config,
            tensors,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.kind.len() as u32).to_le_bytes())?;
        w.write_all(self.kind.as_bytes())?;
        let cfg = self.config.to_text();
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let magic = read_exact::<8>(&mut r)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let kind_len = read_u32(&mut r)? as usize;
        let kind = read_string(&mut r, kind_len)?;
        let cfg_len = read_u64(&mut r)? as usize;
        let config = KvMap::parse(&read_string(&mut r, cfg_len)?)?;
        let count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Format(format!(
                    "tensor `{name}` has rank {rank}"
                )));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 30)
                .ok_or_else(|| CheckpointError::Format(format!("tensor `{name}` is too large")))?;
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| CheckpointError::Format(format!("tensor `{name}` is truncated")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self {
            kind,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Mismatch(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )))
        }
    }

    /// Overwrites every tensor of `store`; names and shapes must match
    /// one-to-one.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store
                .find(&t.name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor `{}`", t.name)))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    dst.shape()
                )));
            }
            for (d, &v) in dst.data_mut().iter_mut().zip(&t.data) {
                *d = T::of(v as f64);
            }
        }
        Ok(())
    }
}
