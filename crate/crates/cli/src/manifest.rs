//! Run manifests: every artifact-producing command records its resolved
//! parameters, seed, tool version, and a content hash of the corpus it read
//! or produced, so a run can be reproduced from the manifest alone.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub corpus_fingerprint: Option<String>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(
        command: &str,
        parameters: serde_json::Value,
        seed: u64,
        corpus_fingerprint: Option<String>,
        started_at: String,
    ) -> Self {
        Self {
            command: command.to_string(),
            parameters,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            corpus_fingerprint,
            started_at,
            finished_at: now_rfc3339(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

/// SHA-256 over the corpus content under `root`: every `.opseq` file plus the
/// planted ground truth, by sorted relative path. Manifests and other
/// by-products are excluded so reruns fingerprint identically.
pub fn corpus_fingerprint(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", root.display()))?;
        let path = entry.path();
        let is_corpus_file = path.extension().is_some_and(|x| x == "opseq")
            || path.file_name().is_some_and(|n| n == "_planted.json");
        if entry.file_type().is_file() && is_corpus_file {
            files.push(entry.into_path());
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for file in files {
        let rel = file.strip_prefix(root).unwrap_or(&file);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
        hasher.update(&bytes);
        hasher.update([0u8]);
    }
    Ok(hex::encode(hasher.finalize()))
}
