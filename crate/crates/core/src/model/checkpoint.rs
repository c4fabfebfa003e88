//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `ALBSRG01`, a little-endian u32 manifest length,
//! the JSON manifest (config, seed, parameter names/shapes/offsets), then
//! the raw little-endian f32 payloads concatenated in manifest order.
//! Offsets are relative to the start of the payload region. Save/load is
//! byte-stable: loading a checkpoint and saving it again reproduces the
//! file exactly.

use super::weights::ModelWeights;
use super::{init_model, ModelConfig, ModelError, Result};
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ALBSRG01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload region.
    pub offset: u64,
    pub num_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    weights: &ModelWeights,
    config: &ModelConfig,
    seed: u64,
) -> Result<()> {
    let names = ModelWeights::param_names(config);
    let params = weights.params();
    debug_assert_eq!(names.len(), params.len());

    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, p) in names.iter().zip(&params) {
        let num_bytes = (p.numel() * 4) as u64;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
            num_bytes,
        });
        offset += num_bytes;
    }
    let manifest = CheckpointManifest {
        config: config.clone(),
        seed,
        params: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    for p in &params {
        for &v in p.value.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelWeights, u64)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| ModelError::Corrupt("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(ModelError::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| ModelError::Corrupt("missing manifest length".into()))?;
    let manifest_len = u32::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| ModelError::Corrupt("truncated manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| ModelError::Corrupt(format!("manifest JSON: {e}")))?;
    manifest.config.validate()?;

    let expected_names = ModelWeights::param_names(&manifest.config);
    if manifest.params.len() != expected_names.len() {
        return Err(ModelError::Corrupt(format!(
            "manifest has {} params, config implies {}",
            manifest.params.len(),
            expected_names.len()
        )));
    }

    // Structure from config, payload from file.
    let mut weights = init_model(&manifest.config, 0)?;
    let mut expected_offset = 0u64;
    {
        let mut params = weights.params_mut();
        for ((entry, name), param) in manifest
            .params
            .iter()
            .zip(&expected_names)
            .zip(params.iter_mut())
        {
            if &entry.name != name {
                return Err(ModelError::Corrupt(format!(
                    "parameter {} out of order, expected {name}",
                    entry.name
                )));
            }
            if entry.shape != param.shape() {
                return Err(ModelError::Corrupt(format!(
                    "{}: shape {:?} does not match config shape {:?}",
                    entry.name,
                    entry.shape,
                    param.shape()
                )));
            }
            if entry.offset != expected_offset || entry.num_bytes != (param.numel() * 4) as u64 {
                return Err(ModelError::Corrupt(format!(
                    "{}: bad offset/size ({}, {})",
                    entry.name, entry.offset, entry.num_bytes
                )));
            }
            expected_offset += entry.num_bytes;

            let mut buf = vec![0u8; entry.num_bytes as usize];
            file.read_exact(&mut buf)
                .map_err(|_| ModelError::Corrupt(format!("{}: truncated payload", entry.name)))?;
            for (v, chunk) in param.value.data_mut().iter_mut().zip(buf.chunks_exact(4)) {
                let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !x.is_finite() {
                    return Err(ModelError::Corrupt(format!(
                        "{}: non-finite value in payload",
                        entry.name
                    )));
                }
                *v = x;
            }
        }
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ModelError::Corrupt(format!(
            "{} trailing bytes after payload",
            rest.len()
        )));
    }
    Ok((manifest.config, weights, manifest.seed))
}

/// Stable identifier for a checkpoint file: first 16 hex chars of the
/// SHA-256 of its bytes.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(hex[..16].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            ..ModelConfig::default()
        };
        let w = init_model(&cfg, 42).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &w, &cfg, 42).unwrap();
        let (cfg2, w2, seed) = load_checkpoint(&p1).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(cfg, cfg2);
        assert!(w.bit_eq(&w2));
        save_checkpoint(&p2, &w2, &cfg2, seed).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC everything else").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Corrupt(_))
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let w = init_model(&cfg, 1).unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&path, &w, &cfg, 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Corrupt(_))
        ));
    }

    #[test]
    fn checkpoint_id_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let w = init_model(&cfg, 5).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &w, &cfg, 5).unwrap();
        let a = checkpoint_id(&path).unwrap();
        let b = checkpoint_id(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }
}
