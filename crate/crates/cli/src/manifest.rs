use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Content address in git's object format (`blob <len>\0<bytes>`), hashed
/// with SHA-256.
pub fn git_blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_seconds: f64,
    pub threads: usize,
    pub deterministic: bool,
    pub version: &'static str,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<InputRecord>,
    outputs: Vec<PathBuf>,
    started: f64,
    deterministic: bool,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, deterministic: bool) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: unix_now(),
            deterministic,
        }
    }

    pub fn config<T: Serialize>(&mut self, c: &T) -> Result<()> {
        self.config = serde_json::to_value(c)?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: git_blob_sha256(&bytes),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(self, dir: &Path) -> Result<()> {
        let finished = unix_now();
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix: self.started,
            finished_unix: finished,
            wall_seconds: finished - self.started,
            threads: rayon::current_num_threads(),
            deterministic: self.deterministic,
            version: env!("CARGO_PKG_VERSION"),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_object_format() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            git_blob_sha256(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
