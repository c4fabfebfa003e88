//! Run manifests and figure emission.
//!
//! Every CLI command writes a manifest recording what produced which
//! artifact; manifests chain (a pass-2 run references the pass-1
//! manifest), and the recorded args + seed are enough to rerun a command
//! to byte-identical numeric outputs. Figures are SVG derived purely
//! from the JSON/CSV artifacts, so they can be regenerated offline.

pub mod svg;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argv after the binary name; rerunning with these args and the
    /// same seed reproduces every numeric artifact byte-for-byte.
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub input_checkpoint: Option<String>,
    pub output_checkpoint: Option<String>,
    /// Manifest path of the run this one chains from (pass 2 -> pass 1).
    pub parent_manifest: Option<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config_hash: String, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            config_hash,
            seed,
            input_checkpoint: None,
            output_checkpoint: None,
            parent_manifest: None,
            started_unix: now_unix(),
            finished_unix: 0,
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix = now_unix();
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn load(path: &Path) -> std::io::Result<RunManifest> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a serializable config, for manifest stamping.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(serde_json::to_string(config).unwrap().as_bytes())[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = RunManifest::new("pretrain", vec!["--seed".into(), "42".into()], "abc".into(), 42);
        m.output_checkpoint = Some("deadbeef".into());
        m.finish();
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.command, "pretrain");
        assert_eq!(back.seed, 42);
        assert_eq!(back.output_checkpoint.as_deref(), Some("deadbeef"));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1}));
        let b = config_hash(&serde_json::json!({"x": 1}));
        let c = config_hash(&serde_json::json!({"x": 2}));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }
}
