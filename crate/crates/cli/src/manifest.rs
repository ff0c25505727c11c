//! The output directory and its `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use adann::experiment::ExperimentConfig;
use serde::Serialize;

use crate::config::config_hash;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a command consumed and produced. Artifact paths are relative to the
/// output directory; input paths are recorded as given.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    pub summary: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&ExperimentConfig>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.map(|c| c.scenario.seed),
            config_hash: config.map(config_hash),
            config: config.cloned(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            summary: serde_json::Map::new(),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.to_string(), path.display().to_string());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).expect("summary value serializes"));
    }
}

/// Writes files under one root and records them as manifest artifacts.
pub struct OutputDir {
    root: PathBuf,
    pub manifest: RunManifest,
}

impl OutputDir {
    pub fn create(root: &Path, manifest: RunManifest) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Record a file some other writer already put under the root.
    pub fn record(&mut self, key: &str, rel: &str) {
        self.manifest.artifacts.insert(key.to_string(), rel.to_string());
    }

    pub fn write(&mut self, key: &str, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.record(key, rel);
        Ok(path)
    }

    pub fn write_json(&mut self, key: &str, rel: &str, value: &impl Serialize) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(adann::Error::from)? + "\n";
        self.write(key, rel, text)
    }

    pub fn finish(self) -> CliResult<PathBuf> {
        let path = self.path(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(adann::Error::from)? + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
