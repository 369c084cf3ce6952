//! `MCFB` feature-bank container.
//!
//! Layout (all integers little-endian, no padding):
//!
//! ```text
//! "MCFB" | version u32 = 1 | rows u32 | dim u32
//! rows × ( id_len u16 | id UTF-8 | dim × f32 )
//! ```

use std::fs;
use std::path::Path;

use super::FeatureBank;
use crate::codec::ByteReader;
use crate::error::{FormatError, Result};

pub const BANK_MAGIC: [u8; 4] = *b"MCFB";
pub const BANK_VERSION: u32 = 1;

pub fn encode_bank(bank: &FeatureBank) -> Result<Vec<u8>> {
    if let Some((row, col)) = bank.first_non_finite() {
        return Err(FormatError::NonFinite {
            row,
            id: bank.ids()[row].clone(),
            col,
        }
        .into());
    }
    let id_bytes: usize = bank.ids().iter().map(|id| 2 + id.len()).sum();
    let mut out = Vec::with_capacity(16 + id_bytes + 4 * bank.dim() * bank.len());
    out.extend_from_slice(&BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.dim() as u32).to_le_bytes());
    for (id, row) in bank.iter() {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_bank(bytes: &[u8]) -> Result<FeatureBank> {
    let mut r = ByteReader::new(bytes);
    r.magic(BANK_MAGIC)?;
    let version = r.u32()?;
    if version != BANK_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: BANK_VERSION,
            found: version,
        }
        .into());
    }
    let rows = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(FormatError::Malformed("dimension is zero".into()).into());
    }
    // cap the reservation by what the payload could possibly hold
    let mut bank = FeatureBank::with_capacity(dim, rows.min(bytes.len() / (2 + 4 * dim)))?;
    let mut row = vec![0f32; dim];
    for i in 0..rows {
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(len)?).map_err(|_| FormatError::InvalidUtf8(i))?;
        for (col, slot) in row.iter_mut().enumerate() {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(FormatError::NonFinite {
                    row: i,
                    id: id.to_string(),
                    col,
                }
                .into());
            }
            *slot = v;
        }
        if bank.contains(id) {
            return Err(FormatError::DuplicateId(id.to_string()).into());
        }
        bank.push(id, &row)?;
    }
    r.finish()?;
    Ok(bank)
}

pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_bank(bank)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    let bytes = fs::read(path)?;
    decode_bank(&bytes)
}
