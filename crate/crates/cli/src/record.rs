//! `run_record.json`: what a run was given and what it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use barkid::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub command: String,
    /// The config file exactly as read; empty when none was given.
    pub config_snapshot: String,
    pub config_sha256: String,
    /// Command-line overrides applied on top of the snapshot.
    pub overrides: Vec<String>,
    /// The configuration actually used, also written as `config.toml`.
    pub effective_config: String,
    pub seeds: BTreeMap<String, u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: BTreeMap<String, ArtifactRef>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl RunRecord {
    pub fn new(command: &str, snapshot: String, overrides: Vec<String>, effective_config: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: sha256_hex(snapshot.as_bytes()),
            config_snapshot: snapshot,
            overrides,
            effective_config,
            seeds: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
            artifacts: BTreeMap::new(),
        }
    }

    /// Hash `run_dir/relative` and list it under `key`.
    pub fn add_artifact(&mut self, key: &str, run_dir: &Path, relative: impl Into<PathBuf>) -> Result<()> {
        let path = relative.into();
        let sha256 = sha256_file(&run_dir.join(&path))?;
        self.artifacts.insert(key.to_string(), ArtifactRef { path, sha256 });
        Ok(())
    }

    pub fn finish(mut self, run_dir: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = run_dir.join("run_record.json");
        let mut text = serde_json::to_string_pretty(&self).expect("record serialises");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
