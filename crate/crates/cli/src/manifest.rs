//! Run manifests, input digests and atomic output files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use netsim_core::config::{Mode, OperatorKind};
use netsim_core::dynamics::RunSummary;

use crate::error::{input, other, CliError};
use crate::settings::RunFile;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Aborted { step: usize, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub status: RunStatus,
    pub seed: u64,
    pub mode: Mode,
    pub operator: OperatorKind,
    pub run: RunFile,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub summary: RunSummary,
}

pub fn tool_version() -> String {
    format!("netsim {}", env!("CARGO_PKG_VERSION"))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of an input file, recorded under its canonical path.
pub fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let path = std::fs::canonicalize(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    Ok(FileDigest { path, sha256: sha256_hex(&bytes) })
}

pub fn verify_digest(d: &FileDigest) -> Result<(), CliError> {
    let bytes = std::fs::read(&d.path).map_err(|e| input(format!("{}: {e}", d.path.display())))?;
    let actual = sha256_hex(&bytes);
    if actual != d.sha256 {
        return Err(input(format!("{} changed since the run (sha256 {actual}, recorded {})", d.path.display(), d.sha256)));
    }
    Ok(())
}

/// Output directory guard: refuses to touch existing artifacts unless `force`.
pub struct OutDir {
    dir: PathBuf,
}

impl OutDir {
    pub fn prepare(dir: &Path, names: &[&str], force: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| other(format!("{}: {e}", dir.display())))?;
        if !force {
            if let Some(name) = names.iter().find(|n| dir.join(n).exists()) {
                return Err(other(format!("{} already exists; pass --force to overwrite", dir.join(name).display())));
            }
        }
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes via a temporary file in the same directory, then renames.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<FileDigest, CliError> {
        let target = self.path(name);
        let fail = |e: &dyn std::fmt::Display| other(format!("{}: {e}", target.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| fail(&e))?;
        tmp.write_all(bytes).map_err(|e| fail(&e))?;
        tmp.as_file().sync_all().map_err(|e| fail(&e))?;
        tmp.persist(&target).map_err(|e| fail(&e.error))?;
        Ok(FileDigest { path: target, sha256: sha256_hex(bytes) })
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<FileDigest, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(other)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }
}

/// Accepts either a manifest file or the run directory holding one.
pub fn read_manifest(path: &Path) -> Result<(RunManifest, PathBuf), CliError> {
    let file = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| input(format!("{}: {e}", file.display())))?;
    let m = serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", file.display())))?;
    let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((m, dir))
}
