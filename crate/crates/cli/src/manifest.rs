//! Per-command manifests. Each lists the content hash of every file it read
//! and wrote, so a chain of manifests links the world seed to the reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Relative path to sha256 hex.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Absent under `--strict-repro`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_secs: Option<f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(sha256_hex(&bytes))
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest.{command}.json")
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_json: &str) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            command: command.into(),
            seed,
            config_hash: sha256_hex(config_json.as_bytes()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            elapsed_secs: None,
        }
    }

    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(manifest_name(&self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(CliError::io(&path))
    }

    /// Records a file read by this command, after checking it against the
    /// manifest of the command that produced it (when that manifest exists).
    pub fn input(&mut self, dir: &Path, rel: &str, producer: &str) -> Result<()> {
        let path = dir.join(rel);
        if !path.exists() {
            return Err(CliError::Missing(path));
        }
        let hash = hash_file(&path)?;
        if let Some(m) = Manifest::load(&dir.join(manifest_name(producer)))? {
            match m.outputs.get(rel) {
                Some(expected) if *expected != hash => {
                    return Err(CliError::Integrity(format!(
                        "{rel} does not match the hash recorded by {producer}"
                    )))
                }
                _ => {}
            }
        }
        self.inputs.insert(rel.into(), hash);
        Ok(())
    }

    /// Writes `bytes` to `dir/rel` and records its hash.
    pub fn output(&mut self, dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
        fs::write(&path, bytes).map_err(CliError::io(&path))?;
        self.outputs.insert(rel.into(), sha256_hex(bytes));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampered_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut producer = Manifest::new("worldgen", 1, "{}");
        producer.output(dir.path(), "a.json", b"[1]").unwrap();
        producer.write(dir.path()).unwrap();

        let mut consumer = Manifest::new("pretrain", 1, "{}");
        consumer.input(dir.path(), "a.json", "worldgen").unwrap();
        assert_eq!(consumer.inputs["a.json"], producer.outputs["a.json"]);

        fs::write(dir.path().join("a.json"), b"[2]").unwrap();
        let err = Manifest::new("pretrain", 1, "{}").input(dir.path(), "a.json", "worldgen").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn missing_input_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = Manifest::new("x", 0, "{}").input(dir.path(), "nope", "y").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
