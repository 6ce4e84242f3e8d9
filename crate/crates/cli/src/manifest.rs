//! `run_manifest.json`: what a command read, what it wrote and how far it
//! got. Inputs are identified by content hash rather than location so a
//! rerun elsewhere produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub role: String,
    /// Relative to the output directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the stored `config.json`, when the command takes one.
    pub config_hash: Option<String>,
    pub inputs: Vec<InputRecord>,
    pub artifacts: Vec<ArtifactRecord>,
    pub stages: BTreeMap<String, StageStatus>,
    pub failure: Option<String>,
}

/// A manifest bound to its output directory; every mutation is flushed so
/// the file on disk always reflects what has been attempted.
pub struct ManifestWriter {
    dir: PathBuf,
    pub manifest: RunManifest,
}

impl ManifestWriter {
    pub fn new(dir: &Path, command: &str) -> Self {
        Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                format_version: MANIFEST_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                config_hash: None,
                inputs: Vec::new(),
                artifacts: Vec::new(),
                stages: BTreeMap::new(),
                failure: None,
            },
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `config.json` and records its hash.
    pub fn store_config(&mut self, json: &str) -> Result<(), Failure> {
        self.manifest.config_hash = Some(sha256_hex(json.as_bytes()));
        write_file(&self.dir.join("config.json"), json.as_bytes())?;
        self.record_artifact("config", "config.json")
    }

    pub fn record_input(&mut self, role: &str, sha256: String) -> Result<(), Failure> {
        self.manifest.inputs.push(InputRecord {
            role: role.into(),
            sha256,
        });
        self.flush()
    }

    /// Records an artifact path; call before writing the artifact.
    pub fn record_artifact(&mut self, role: &str, path: &str) -> Result<(), Failure> {
        if !self.manifest.artifacts.iter().any(|a| a.path == path) {
            self.manifest.artifacts.push(ArtifactRecord {
                role: role.into(),
                path: path.into(),
            });
        }
        self.flush()
    }

    pub fn stage(&mut self, name: &str, status: StageStatus) -> Result<(), Failure> {
        self.manifest.stages.insert(name.into(), status);
        self.flush()
    }

    pub fn fail(&mut self, stage: &str, failure: &Failure) -> Result<(), Failure> {
        self.manifest.failure = Some(failure.message.clone());
        self.stage(stage, StageStatus::Failed)
    }

    pub fn flush(&self) -> Result<(), Failure> {
        let mut json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        json.push('\n');
        write_file(&self.dir.join(MANIFEST_FILE), json.as_bytes())
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, Failure> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| Failure::io("reading run manifest", e))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("run manifest: {e}")))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::io(&format!("writing {}", path.display()), e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file, or of a directory tree as the sequence of
/// (relative path, file hash) pairs in sorted order.
pub fn hash_path(path: &Path) -> Result<String, Failure> {
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| Failure::io(&format!("reading {}", path.display()), e))?;
        return Ok(sha256_hex(&bytes));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(path.join(&rel)).map_err(|e| Failure::io(&format!("reading {rel}"), e))?;
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::io(&format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Failure::io("listing directory", e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            let rel = p.strip_prefix(root).unwrap();
            out.push(
                rel.components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
            );
        }
    }
    Ok(())
}
