//! Single-file weight checkpoint.
//!
//! Layout: `b"MMDT"`, format version (`u32` LE), config JSON length (`u32`
//! LE), config JSON, then every weight matrix as a matrix blob in
//! declaration order.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{decode_matrix_prefix, encode_matrix};

const MAGIC: &[u8; 4] = b"MMDT";
const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    for m in model.matrices() {
        out.extend_from_slice(&encode_matrix(m));
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cfg_bytes = bytes
        .get(12..12 + cfg_len)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let cfg: ModelConfig = serde_json::from_slice(cfg_bytes)?;

    // Build the layout from the config, then overwrite every matrix.
    let mut model = Model::new(cfg)?;
    let mut pos = 12 + cfg_len;
    for slot in model.matrices_mut() {
        let (m, used) = decode_matrix_prefix(&bytes[pos..])?;
        if m.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "checkpoint matrix {:?} where {:?} was expected",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
        pos += used;
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}
