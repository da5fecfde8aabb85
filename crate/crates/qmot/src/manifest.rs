//! Run manifests: enough provenance to reproduce any command's outputs
//! byte-for-byte on the same platform.

use crate::config::RunConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub checkpoint: Option<String>,
    /// SHA-256 of each input dataset archive.
    pub dataset_fingerprints: Vec<String>,
    pub outputs: Vec<String>,
    pub created_at: String,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            seed,
            checkpoint: None,
            dataset_fingerprints: Vec::new(),
            outputs: Vec::new(),
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("manifest: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", RunConfig::default(), 42);
        m.outputs.push("model.ckpt".into());
        m.dataset_fingerprints.push("abc123".into());
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m, back);
    }
}
