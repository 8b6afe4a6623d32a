//! Run manifests: every command records the exact configuration that
//! produced its outputs, so any figure can be regenerated from its sidecar.
//!
//! The manifest hash covers everything except the timestamps; outputs embed
//! that hash, which keeps reruns byte-identical while still pinning
//! provenance.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 over the compact JSON form of any serializable config.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    /// Hash over (schema, tool_version, command, config, outputs) — the
    /// timestamp-free content.
    pub manifest_hash: String,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
}

#[derive(Serialize)]
struct Hashed<'a> {
    schema: u32,
    tool_version: &'a str,
    command: &'a str,
    config: &'a serde_json::Value,
    outputs: &'a [String],
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        outputs: Vec<String>,
    ) -> Result<Self, serde_json::Error> {
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let hash = config_hash(&Hashed {
            schema: MANIFEST_SCHEMA,
            tool_version: &tool_version,
            command,
            config: &config,
            outputs: &outputs,
        })?;
        let now = now_unix();
        Ok(RunManifest {
            schema: MANIFEST_SCHEMA,
            tool_version,
            command: command.to_string(),
            config,
            outputs,
            manifest_hash: hash,
            started_at_unix: now,
            finished_at_unix: now,
        })
    }

    pub fn finish(&mut self) {
        self.finished_at_unix = now_unix();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_timestamps() {
        let config = serde_json::json!({"seed": 7, "n": 100});
        let mut a = RunManifest::new("gen-data", config.clone(), vec!["d.csv".into()]).unwrap();
        let b = RunManifest::new("gen-data", config, vec!["d.csv".into()]).unwrap();
        a.finish();
        assert_eq!(a.manifest_hash, b.manifest_hash);
    }

    #[test]
    fn hash_tracks_config_changes() {
        let a = RunManifest::new("train", serde_json::json!({"seed": 1}), vec![]).unwrap();
        let b = RunManifest::new("train", serde_json::json!({"seed": 2}), vec![]).unwrap();
        assert_ne!(a.manifest_hash, b.manifest_hash);
    }

    #[test]
    fn sha256_is_the_known_test_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
