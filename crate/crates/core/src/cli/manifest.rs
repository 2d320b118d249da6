//! Run manifests: one JSON file per command run listing config hash, seed,
//! input and output digests, and item counters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub counts: BTreeMap<String, u64>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let file = File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Where the manifest for `primary` lives.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

/// Files under the manifest's directory are recorded relative to it, so two
/// runs into different directories produce the same manifest.
fn display_relative(path: &Path, base: &Path) -> String {
    match path.strip_prefix(base) {
        Ok(rel) if !base.as_os_str().is_empty() => rel.display().to_string(),
        _ => path.display().to_string(),
    }
}

pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    counts: BTreeMap<String, u64>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_hash: String, seed: Option<u64>) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config_hash,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn count(&mut self, key: &str, value: u64) -> &mut Self {
        self.counts.insert(key.to_string(), value);
        self
    }

    /// Hashes all files, writes `<primary>.manifest.json` (primary = first
    /// output) and returns its path and SHA-256.
    pub fn write(&self) -> anyhow::Result<(PathBuf, String)> {
        let primary = self
            .outputs
            .first()
            .context("manifest needs at least one output")?;
        let path = manifest_path(primary);
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let digest = |p: &PathBuf| -> anyhow::Result<FileDigest> {
            Ok(FileDigest {
                path: display_relative(p, &base),
                sha256: sha256_file(p)?,
            })
        };
        let manifest = Manifest {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            inputs: self
                .inputs
                .iter()
                .map(digest)
                .collect::<anyhow::Result<_>>()?,
            outputs: self
                .outputs
                .iter()
                .map(digest)
                .collect::<anyhow::Result<_>>()?,
            counts: self.counts.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        Ok((path, hex::encode(Sha256::digest(text.as_bytes()))))
    }
}
