//! Versioned checkpoint format.
//!
//! Layout: the magic bytes `PTSS1`, a little-endian `u64` header length, a
//! JSON header (config plus tensor directory), then every tensor as raw
//! little-endian `f32` in directory order.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layout, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 5] = b"PTSS1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// Unix seconds; 0 for deterministic output.
    pub created: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(params: &ModelParams<f32>, deterministic: bool) -> Result<Vec<u8>> {
    params.validate()?;
    let layout = params.layout();
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(params.tensors.len());
    for (id, t) in params.tensors.iter().enumerate() {
        tensors.push(TensorEntry {
            name: layout.name(id).to_string(),
            shape: [t.nrows(), t.ncols()],
            offset,
        });
        offset += t.len() * 4;
    }
    let created = if deterministic {
        0
    } else {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    };
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        created,
        config: params.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &params.tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < MAGIC.len() {
        return Err(corrupt("file shorter than magic"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::VersionMismatch(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(&bytes[..MAGIC.len()])
        )));
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 8] = rest.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| corrupt("truncated header length"))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length overflow"))?;
    let header_bytes = rest.get(8..8usize.saturating_add(header_len)).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!("format version {} (expected {FORMAT_VERSION})", header.version)));
    }
    let payload = &rest[8 + header_len..];
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(corrupt("tensor count does not match config"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut end = 0;
    for (id, entry) in header.tensors.iter().enumerate() {
        let [r, c] = entry.shape;
        if entry.name != layout.name(id) || (r, c) != layout.shape(id) {
            return Err(corrupt(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let nbytes = r * c * 4;
        let raw = payload
            .get(entry.offset..entry.offset + nbytes)
            .ok_or_else(|| corrupt(&format!("truncated tensor {}", entry.name)))?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        tensors.push(Array2::from_shape_vec((r, c), values).map_err(|e| corrupt(&e.to_string()))?);
        end = end.max(entry.offset + nbytes);
    }
    if end != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(ModelParams {
        config: header.config,
        tensors,
    })
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path, deterministic: bool) -> Result<()> {
    fs::write(path, to_bytes(params, deterministic)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams<f32> {
        let cfg = ModelConfig {
            window: 16,
            channels: 2,
            k_total: 3,
            d_model: 8,
            patch_len: 4,
            patch_stride: 4,
            encoder_layers: 1,
            decoder_layers: 2,
            heads: 2,
            mlp_hidden: 16,
            ..Default::default()
        };
        ModelParams::init(&cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = small();
        let bytes = to_bytes(&p, true).unwrap();
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(p.config, q.config);
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(bytes, to_bytes(&q, true).unwrap());
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = to_bytes(&small(), true).unwrap();
        for cut in [3, 6, 20, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let mut bytes = to_bytes(&small(), true).unwrap();
        bytes[4] = b'2';
        assert!(matches!(from_bytes(&bytes), Err(Error::VersionMismatch(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ptss");
        let p = small();
        save_checkpoint(&p, &path, false).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().tensors, p.tensors);
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
