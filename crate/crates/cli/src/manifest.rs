//! Run manifests: one `manifest.json` per output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub version: String,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the directory.
    pub outputs: Vec<String>,
    /// Derived run parameters worth recording (e.g. an auto-selected gain).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub struct ManifestBuilder {
    m: RunManifest,
    dir: PathBuf,
}

impl ManifestBuilder {
    pub fn start(dir: &Path, config: &impl Serialize) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let canonical = serde_json::to_vec(config).context("serializing run config")?;
        Ok(ManifestBuilder {
            m: RunManifest {
                command: std::env::args().skip(1).collect(),
                config_hash: sha256_hex(&canonical),
                seed: None,
                version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                notes: BTreeMap::new(),
                started_at: now(),
                finished_at: String::new(),
            },
            dir: dir.to_path_buf(),
        })
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.m.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.m.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(self)
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.m
            .notes
            .insert(key.to_string(), serde_json::to_value(value).expect("note serializes"));
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `bytes` to `dir/name` and records it as an output.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.m.outputs.push(name.to_string());
        Ok(path)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.m.finished_at = now();
        let text = serde_json::to_string_pretty(&self.m)? + "\n";
        std::fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(self.m)
    }
}
