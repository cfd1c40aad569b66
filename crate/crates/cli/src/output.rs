//! Atomic artifact writes and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub stages: Vec<Stage>,
}

/// Writes into one directory, each file via a temporary sibling and a
/// rename, and records what was written.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    stages: Vec<Stage>,
}

impl OutputDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputDir { root: root.into(), stages: Vec::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage(&mut self, name: &str) {
        self.stages.push(Stage { name: name.to_owned(), artifacts: Vec::new() });
    }

    /// Writes `bytes` to `file` (a bare name inside the directory).
    pub fn write(&mut self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        assert!(!file.contains('/') && !file.contains('\\'), "artifact names are bare file names");
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        let path = self.root.join(file);
        write_atomic(&path, bytes)?;
        let artifact =
            Artifact { file: file.to_owned(), bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(bytes)) };
        if self.stages.is_empty() {
            self.stage("output");
        }
        self.stages.last_mut().expect("a stage").artifacts.push(artifact);
        Ok(path)
    }

    /// Renders with `f` into memory, then writes atomically.
    pub fn write_with(
        &mut self,
        file: &str,
        f: impl FnOnce(&mut Vec<u8>) -> ngfkt_core::Result<()>,
    ) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("rendering {file}"))?;
        self.write(file, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(file, &bytes)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Writes `manifest.json` listing every artifact so far.
    pub fn finish(mut self, command: &str, config: serde_json::Value) -> Result<Manifest> {
        let manifest = Manifest { command: command.to_owned(), config, stages: self.stages.clone() };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::create_dir_all(&self.root)?;
        write_atomic(&self.root.join("manifest.json"), &bytes)?;
        self.stages.clear();
        Ok(manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).context("artifact path has no file name")?;
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}
