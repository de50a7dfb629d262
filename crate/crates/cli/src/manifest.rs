//! Per-directory manifests and the overwrite guard.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{at, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "pmri";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub id: String,
    pub group: u32,
    pub holdout: bool,
}

/// Written last into every output directory. Contains no timestamps or
/// absolute paths so that identical inputs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub stage: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Config hashes of the stages this one consumed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub upstream: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<SliceEntry>,
    /// Relative path to SHA-256 of every other file in the directory.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, config_hash: &str) -> Self {
        Self {
            tool: TOOL.into(),
            tool_version: TOOL_VERSION.into(),
            stage: stage.into(),
            config_hash: config_hash.into(),
            seeds: BTreeMap::new(),
            upstream: BTreeMap::new(),
            settings: BTreeMap::new(),
            slices: Vec::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = at(&path, fs::read_to_string(&path))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))?;
        if m.tool != TOOL {
            return Err(CliError::Mismatch(format!("{} was not written by {TOOL}", path.display())));
        }
        Ok(m)
    }

    /// Loads the manifest and insists it came from `stage`.
    pub fn load_stage(dir: &Path, stage: &str) -> Result<Self> {
        let m = Self::load(dir)?;
        if m.stage != stage {
            return Err(CliError::Mismatch(format!(
                "{} holds a {} output, expected {stage}",
                dir.display(),
                m.stage
            )));
        }
        Ok(m)
    }

    /// Hashes every file under `dir` and writes the manifest.
    pub fn seal(mut self, dir: &Path) -> Result<Self> {
        self.files = hash_tree(dir)?;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        let path = dir.join(MANIFEST_FILE);
        at(&path, fs::write(&path, text))?;
        Ok(self)
    }

    /// Checks that the files on disk still match the recorded hashes.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let actual = hash_tree(dir)?;
        for (name, hash) in &self.files {
            match actual.get(name) {
                Some(h) if h == hash => {}
                Some(_) => {
                    return Err(CliError::Mismatch(format!(
                        "{} changed since its manifest was written",
                        dir.join(name).display()
                    )))
                }
                None => {
                    return Err(CliError::Mismatch(format!("{} is missing", dir.join(name).display())))
                }
            }
        }
        Ok(())
    }

    /// Refuses to combine artifacts built from different upstream runs.
    pub fn expect_upstream(&self, name: &str, hash: &str) -> Result<()> {
        match self.upstream.get(name) {
            Some(h) if h == hash => Ok(()),
            Some(h) => Err(CliError::Mismatch(format!(
                "{} output was built from {name} {}, not {}",
                self.stage,
                short(h),
                short(hash)
            ))),
            None => Err(CliError::Mismatch(format!("{} output records no {name}", self.stage))),
        }
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = at(path, fs::read(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let abs = dir.join(&rel);
        for entry in at(&abs, fs::read_dir(&abs))? {
            let entry = at(&abs, entry)?;
            let name = rel.join(entry.file_name());
            if at(&abs, entry.file_type())?.is_dir() {
                stack.push(name);
            } else if name != Path::new(MANIFEST_FILE) {
                let key = name
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(key, sha256_file(&dir.join(&name))?);
            }
        }
    }
    Ok(out)
}

/// Makes `dir` ready for a stage's outputs. A non-empty directory is
/// only cleared with `force`, and only if it holds one of our manifests.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = at(dir, fs::read_dir(dir))?;
        if entries.next().is_none() {
            return Ok(());
        }
        if !force {
            return Err(CliError::Exists(dir.to_path_buf()));
        }
        if Manifest::load(dir).is_err() {
            return Err(CliError::Mismatch(format!(
                "{} has no {TOOL} manifest; not removing it",
                dir.display()
            )));
        }
        at(dir, fs::remove_dir_all(dir))?;
    }
    at(dir, fs::create_dir_all(dir))
}

/// Guard for single-file outputs.
pub fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        at(parent, fs::create_dir_all(parent))?;
    }
    Ok(())
}
