//! Inventory of everything a command wrote, with checksums.

use crate::error::{io_at, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub versions: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Wall-clock seconds per phase.
    pub timings: Vec<(String, f64)>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        let versions = BTreeMap::from([
            ("fedcox".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("message_schema".to_string(), fedcox_federation::message::SCHEMA_VERSION.to_string()),
        ]);
        Self {
            command: command.into(),
            versions,
            config,
            seeds: BTreeMap::new(),
            timings: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory that records every file written through it.
pub struct OutputDir {
    root: PathBuf,
    pub manifest: RunManifest,
}

impl OutputDir {
    pub fn create(root: &Path, manifest: RunManifest) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(io_at(root))?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `rel` below the root; a later write to the same path replaces
    /// its entry.
    pub fn write(&mut self, rel: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_at(parent))?;
        }
        std::fs::write(&path, contents).map_err(io_at(&path))?;
        let entry = FileEntry { path: rel.to_string(), bytes: contents.len() as u64, sha256: sha256_hex(contents) };
        match self.manifest.files.iter_mut().find(|f| f.path == rel) {
            Some(f) => *f = entry,
            None => self.manifest.files.push(entry),
        }
        Ok(path)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&self.manifest)?;
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, text + "\n").map_err(io_at(&path))?;
        Ok(self.manifest)
    }
}
