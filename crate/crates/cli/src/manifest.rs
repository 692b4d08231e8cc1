//! Run manifests: every command records what it ran with, and every
//! artifact embeds the hash of the manifest that produced it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Schema version for all artifacts this binary writes.
pub const ARTIFACT_VERSION: &str = "v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Hash over the deterministic fields above; timing is excluded so two
    /// identical runs produce identical hashes.
    pub manifest_hash: String,
    pub timing_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_hash: String,
        seeds: Vec<u64>,
        inputs: Vec<String>,
        outputs: Vec<String>,
    ) -> Self {
        let preimage = format!(
            "{command}|{ARTIFACT_VERSION}|{config_hash}|{seeds:?}|{inputs:?}|{outputs:?}"
        );
        let manifest_hash = sha256_hex(preimage.as_bytes());
        Self {
            command: command.to_string(),
            artifact_version: ARTIFACT_VERSION.to_string(),
            config_hash,
            seeds,
            inputs,
            outputs,
            manifest_hash,
            timing_s: 0.0,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("run_manifest.json"), json)
    }
}
