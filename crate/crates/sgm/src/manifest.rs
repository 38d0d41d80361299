//! Per-run provenance record.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::hex;
use crate::error::{Error, Result};
use crate::fsio::write_json;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration; enough to repeat the run.
    pub config: Value,
    /// SHA-256 over the input files, in argument order.
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Hashes files (or every file below a directory, in sorted order) together
/// with their relative names. Run manifests are skipped.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let mut files = Vec::new();
        collect_files(p, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(p).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(std::fs::read(&f).map_err(Error::io(&f))?);
        }
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for e in std::fs::read_dir(p).map_err(Error::io(p))? {
            let e = e.map_err(Error::io(p))?;
            collect_files(&e.path(), out)?;
        }
    } else if p.file_name().is_none_or(|n| n != MANIFEST_FILE) {
        out.push(p.to_path_buf());
    }
    Ok(())
}

/// Collects outputs during a run and writes the manifest at the end.
pub struct RunRecorder {
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn start(command: &str, config: Value, inputs: Vec<PathBuf>, seed: u64) -> Result<Self> {
        Ok(Self {
            manifest: RunManifest {
                command: command.into(),
                config,
                input_hash: hash_inputs(&inputs)?,
                inputs,
                seed,
                started: now(),
                finished: 0.0,
                outputs: Vec::new(),
            },
        })
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.manifest.outputs.push(path.into());
    }

    /// Checks every declared output exists, then writes the manifest
    /// atomically into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<RunManifest> {
        for p in &self.manifest.outputs {
            if !p.exists() {
                return Err(Error::Io {
                    path: p.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "declared output missing"),
                });
            }
        }
        self.manifest.finished = now();
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, &self.manifest)?;
        Ok(self.manifest)
    }
}
