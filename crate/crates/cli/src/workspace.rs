//! Output directory layout, stage manifests and checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::Stage;

pub const MANIFEST_FILE: &str = "stage.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(MANIFEST_FILE)
    }

    pub fn read_manifest(&self, stage: Stage) -> Result<Option<StageManifest>, CliError> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    /// Output checksums of every prerequisite; errors name the first stage
    /// that has not been run.
    pub fn inputs_for(&self, stage: Stage) -> Result<BTreeMap<String, String>, CliError> {
        let mut inputs = BTreeMap::new();
        for dep in stage.prerequisites() {
            let manifest = self.read_manifest(*dep)?.ok_or_else(|| CliError::MissingStage {
                stage: dep.name(),
                path: self.manifest_path(*dep).display().to_string(),
            })?;
            for (rel, sha) in manifest.outputs {
                if !self.path(&rel).exists() {
                    return Err(CliError::MissingStage { stage: dep.name(), path: self.path(&rel).display().to_string() });
                }
                inputs.insert(rel, sha);
            }
        }
        Ok(inputs)
    }

    /// True when the recorded manifest matches the config, the current inputs
    /// and the files on disk.
    pub fn is_up_to_date(
        &self,
        stage: Stage,
        config_sha: &str,
        inputs: &BTreeMap<String, String>,
    ) -> Result<bool, CliError> {
        let Some(m) = self.read_manifest(stage)? else { return Ok(false) };
        if m.config_sha256 != config_sha || &m.inputs != inputs {
            return Ok(false);
        }
        for (rel, sha) in inputs.iter().chain(&m.outputs) {
            let p = self.path(rel);
            if !p.exists() || &file_sha256(&p)? != sha {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Removes a stage's directory so no stale files survive a rerun.
    pub fn reset_stage(&self, stage: Stage) -> Result<PathBuf, CliError> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }

    /// Records checksums of every file the stage wrote.
    pub fn finish_stage(
        &self,
        stage: Stage,
        seed: u64,
        config_sha: &str,
        inputs: BTreeMap<String, String>,
    ) -> Result<StageManifest, CliError> {
        let dir = self.stage_dir(stage);
        let mut outputs = BTreeMap::new();
        for file in list_files(&dir)? {
            let rel = relative(&self.root, &file);
            if rel.ends_with(MANIFEST_FILE) && file.parent() == Some(dir.as_path()) {
                continue;
            }
            outputs.insert(rel, file_sha256(&file)?);
        }
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            seed,
            config_sha256: config_sha.to_string(),
            inputs,
            outputs,
        };
        write_json(&self.manifest_path(stage), &manifest)?;
        Ok(manifest)
    }
}

fn relative(root: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(root).unwrap_or(file);
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

/// Files under `dir`, recursively, in sorted order.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| CliError::io(&d, e))? {
            let path = entry.map_err(|e| CliError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}
