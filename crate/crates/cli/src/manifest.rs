//! Run manifests: config echo, seed, timestamps, and a content digest for
//! every file the run produced.
//!
//! The manifest is the one output that carries wall-clock data; everything it
//! points at is a deterministic function of flags and seed, which re-running
//! with the echoed config can be checked against via the digests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct ManifestDoc {
    command: String,
    version: String,
    seed: u64,
    config: serde_json::Value,
    started_unix: u64,
    finished_unix: u64,
    wall_time_s: f64,
    outputs: Vec<OutputEntry>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    notes: serde_json::Value,
}

pub struct RunManifest {
    command: String,
    seed: u64,
    config: serde_json::Value,
    started: SystemTime,
    outputs: Vec<PathBuf>,
    notes: serde_json::Value,
}

fn unix_secs(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config,
            started: SystemTime::now(),
            outputs: Vec::new(),
            notes: serde_json::Value::Null,
        }
    }

    /// Register a produced file; it must exist by the time `finish` runs.
    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn set_notes(&mut self, notes: serde_json::Value) {
        self.notes = notes;
    }

    /// Digest outputs and write `manifest.json` into `dir`.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        let finished = SystemTime::now();
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for path in &self.outputs {
            let bytes = std::fs::read(path)
                .with_context(|| format!("digesting output {}", path.display()))?;
            outputs.push(OutputEntry {
                path: path
                    .strip_prefix(dir)
                    .unwrap_or(path)
                    .display()
                    .to_string(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        let doc = ManifestDoc {
            command: self.command,
            version: erasure_core::VERSION.to_string(),
            seed: self.seed,
            config: self.config,
            started_unix: unix_secs(self.started),
            finished_unix: unix_secs(finished),
            wall_time_s: finished
                .duration_since(self.started)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            outputs,
            notes: self.notes,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("manifest serializes"))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
