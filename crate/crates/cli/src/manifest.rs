use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Collects inputs and outputs of a run and writes the manifest at the end.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `<dir>/<command>.manifest.json` and returns its path.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config: self.config,
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            wall_seconds: self.start.elapsed().as_secs_f64(),
        };
        let path = dir.join(format!("{}.manifest.json", self.command));
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(path)
    }
}
