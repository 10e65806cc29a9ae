use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::Result;

pub const MANIFEST_VERSION: u32 = 1;

/// What identifies a run: the config (with its seed) and the code version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub seed: u64,
    /// Step that wrote the manifest (`gen`, `finetune`, `analyze`, ...).
    pub command: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Manifest {
            format_version: MANIFEST_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            command: command.to_string(),
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    /// `<command>.manifest.json`, so chained steps in one directory keep theirs.
    pub fn file_name(&self) -> String {
        format!("{}.manifest.json", self.command)
    }

    /// Writes the manifest into `dir` and returns its hash.
    pub fn write(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(self.file_name()), self.to_json()?)?;
        self.hash()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(crate::Error::Format(format!(
                "manifest version {}, this build reads version {MANIFEST_VERSION}",
                m.format_version
            )));
        }
        m.config.validate()?;
        Ok(m)
    }
}
