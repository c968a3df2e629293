//! Run manifests and atomic output bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use odp_core::formats::write_atomic;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key, so a round trip through
    // `Value` sorts every nested object.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: serde_json::Value,
    /// Input path to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to sha256.
    pub outputs: BTreeMap<String, String>,
}

/// Collects the outputs of one command and writes its manifest last.
pub struct Run {
    command: String,
    dir: PathBuf,
    started_at: String,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Run {
    pub fn start<T: Serialize>(command: &str, dir: &Path, seed: u64, config: &T) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            command: command.to_string(),
            dir: dir.to_path_buf(),
            started_at: now(),
            seed,
            config: serde_json::from_str(&canonical_json(config)?)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    /// Records the digest of an input file, or of every file in a directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            for p in entries.iter().filter(|p| p.is_file()) {
                self.input(p)?;
            }
        } else {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        }
        Ok(())
    }

    /// Atomically writes `name` under the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(self) -> Result<RunManifest> {
        let config_hash = sha256_hex(serde_json::to_string(&self.config)?.as_bytes());
        let manifest = RunManifest {
            command: self.command,
            config_hash,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: now(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.dir.join(MANIFEST_NAME), text.as_bytes())?;
        Ok(manifest)
    }
}
