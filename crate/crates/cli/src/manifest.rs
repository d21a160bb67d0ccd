use crate::error::{CliResult, WithPath};
use iwavb_core::io::write_json;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Fully resolved configuration; feeding it back as `--config` reruns the command.
    pub config: Option<serde_json::Value>,
    pub config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<FileDigest>,
    pub holdout_ids: Option<Vec<usize>>,
    pub wall_time_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            config_hash: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            holdout_ids: None,
            wall_time_seconds: 0.0,
        }
    }

    pub fn with_config<C: Serialize>(mut self, config: &C) -> CliResult<Self> {
        let value = serde_json::to_value(config)?;
        self.config_hash = Some(sha256_hex(serde_json::to_string(&value)?.as_bytes()));
        self.config = Some(value);
        Ok(self)
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: file_digest(path)?,
        });
        Ok(())
    }

    /// Records `rel` (relative to `out`) as an artifact.
    pub fn add_artifact(&mut self, out: &Path, rel: &str) -> CliResult<()> {
        self.artifacts.push(FileDigest {
            path: rel.to_string(),
            sha256: file_digest(&out.join(rel))?,
        });
        Ok(())
    }

    pub fn write(&self, out: &Path) -> CliResult<()> {
        let path = out.join(MANIFEST_FILE);
        write_json(&path, self).at(&path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(sha256_hex(&bytes))
}
