//! Run manifests and the per-directory writer lock.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub build_version: String,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub artifacts: Vec<Artifact>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunManifest {
    pub fn load_or_new(dir: &Path, threads: usize) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            Self::load(dir)
        } else {
            Ok(Self {
                build_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: None,
                seeds: Vec::new(),
                threads,
                created_unix: now(),
                updated_unix: now(),
                artifacts: Vec::new(),
            })
        }
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))
    }

    pub fn add_seed(&mut self, seed: u64) {
        if !self.seeds.contains(&seed) {
            self.seeds.push(seed);
        }
    }

    /// Records (or refreshes) one artifact; a path appears at most once.
    pub fn record(&mut self, dir: &Path, kind: &str, file: &str) -> Result<(), CliError> {
        let sha256 = file_sha256(&dir.join(file))?;
        self.artifacts.retain(|a| a.path != file);
        self.artifacts.push(Artifact {
            kind: kind.to_string(),
            path: file.to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn save(&mut self, dir: &Path) -> Result<(), CliError> {
        self.updated_unix = now();
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n").map_err(|e| CliError::Runtime(e.to_string()))
    }

    /// Checks a listed artifact's digest against the file on disk.
    pub fn verify(&self, dir: &Path, file: &str) -> Result<(), CliError> {
        let entry = self
            .artifacts
            .iter()
            .find(|a| a.path == file)
            .ok_or_else(|| CliError::Integrity(format!("{file} is not listed in the run manifest")))?;
        let actual = file_sha256(&dir.join(file))?;
        if actual != entry.sha256 {
            return Err(CliError::Integrity(format!(
                "{file} does not match its manifest digest; it was modified after the run"
            )));
        }
        Ok(())
    }
}

/// Exclusive writer lock on a run directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|_| {
                CliError::Runtime(format!(
                    "{} is locked by another writer (remove {} if no run is active)",
                    dir.display(),
                    path.display()
                ))
            })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
