//! `MCKP` model checkpoint container.
//!
//! Layout (all integers little-endian, no padding):
//!
//! ```text
//! "MCKP" | version u32 = 1
//! config_len u32 | config UTF-8 (key = value lines)
//! tensor_count u32
//! tensor_count × ( name_len u16 | name UTF-8 | rows u32 | cols u32 | rows·cols × f64 )
//! ```
//!
//! Tensors are stored as 64-bit reals so parameters round-trip bit-exactly.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::codec::ByteReader;
use crate::config::{parse_kv, KvConfig};
use crate::error::{Error, FormatError, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Key in the config echo naming the model family.
pub const MODEL_KEY: &str = "model";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key = value` lines.
    pub config: String,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    /// Config echo with a leading `model = <kind>` line.
    pub fn new<C: KvConfig>(kind: &str, config: &C, tensors: Vec<(String, Matrix)>) -> Self {
        Checkpoint {
            config: format!("{MODEL_KEY} = {kind}\n{}", config.to_kv_string()),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn model_kind(&self) -> Result<String> {
        parse_kv(&self.config)?
            .into_iter()
            .find(|(k, _)| k == MODEL_KEY)
            .map(|(_, v)| v)
            .ok_or_else(|| FormatError::Malformed("config echo lacks a model line".into()).into())
    }

    /// Rebuilds the config, checking the model kind first.
    pub fn config_as<C: KvConfig>(&self, kind: &str) -> Result<C> {
        let found = self.model_kind()?;
        if found != kind {
            return Err(Error::validation(
                MODEL_KEY,
                format!("checkpoint holds a {found} model, expected {kind}"),
            ));
        }
        let mut cfg = C::default();
        for (k, v) in parse_kv(&self.config)? {
            if k != MODEL_KEY {
                cfg.set(&k, &v)?;
            }
        }
        Ok(cfg)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, m) in &ckpt.tensors {
        if name.len() > u16::MAX as usize {
            return Err(FormatError::IdTooLong(name.len()).into());
        }
        if !seen.insert(name.as_str()) {
            return Err(FormatError::DuplicateId(name.clone()).into());
        }
        if let Some(k) = m.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite {
                row: k / m.cols().max(1),
                id: name.clone(),
                col: k % m.cols().max(1),
            }
            .into());
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.config.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.config.as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, m) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        }
        .into());
    }
    let config_len = r.u32()? as usize;
    let config = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| FormatError::Malformed("config echo is not UTF-8".into()))?
        .to_string();
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    let mut seen = HashSet::new();
    for t in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::InvalidUtf8(t))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| FormatError::Malformed(format!("tensor {name:?} shape overflows")))?;
        let raw =
            r.take(n.checked_mul(8).ok_or_else(|| {
                FormatError::Malformed(format!("tensor {name:?} shape overflows"))
            })?)?;
        let mut data = Vec::with_capacity(n);
        for (k, chunk) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(FormatError::NonFinite {
                    row: k / cols.max(1),
                    id: name,
                    col: k % cols.max(1),
                }
                .into());
            }
            data.push(v);
        }
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateId(name).into());
        }
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    r.finish()?;
    Ok(Checkpoint { config, tensors })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
