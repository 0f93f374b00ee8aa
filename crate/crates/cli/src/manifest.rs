//! Run manifests: one JSON file per artifact-producing command.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub voloc: &'static str,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective configuration as canonical JSON.
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// Collects what a command read and wrote, then writes the manifest.
pub struct ManifestBuilder {
    command: &'static str,
    config_sha256: String,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new<C: Serialize>(command: &'static str, config: &C, seed: Option<u64>) -> Result<Self, CliError> {
        let json = serde_json::to_vec(config).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(Self {
            command,
            config_sha256: sha256_hex(&json),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(file_digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(self, path: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_sha256: self.config_sha256,
            seed: self.seed,
            versions: Versions {
                voloc: env!("CARGO_PKG_VERSION"),
            },
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// `<artifact>.manifest.json` next to the artifact.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
