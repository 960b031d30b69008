//! Content-addressed checkpoint registry: a directory of `<id>.lxsc` files
//! plus a `manifest.json`, many concurrent readers, one writer at a time
//! (lock file), atomic manifest replacement.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{container, load_checkpoint, save_checkpoint, SaveOptions};
use crate::adapter::LoraXsAdapter;
use crate::error::{Error, Result};

const MANIFEST_NAME: &str = "manifest.json";
const LOCK_NAME: &str = ".lock";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub checkpoint_id: String,
    /// File name relative to the registry root.
    pub path: String,
    pub base_model_id: String,
    /// Unix seconds.
    pub created_at: u64,
    pub byte_size: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    manifest_version: u32,
    entries: Vec<ManifestEntry>,
}

/// Exclusive writer lock, released on drop.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_NAME);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::RegistryLocked { path })
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

/// Per-entry verification outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyStatus {
    Ok,
    MissingFile,
    SizeMismatch { manifest: u64, file: u64 },
    Corrupt(String),
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub entries: Vec<(ManifestEntry, VerifyStatus)>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.entries.iter().all(|(_, s)| *s == VerifyStatus::Ok)
    }

    pub fn failures(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, s)| *s != VerifyStatus::Ok)
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct GcReport {
    /// Unreferenced checkpoint files (relative names).
    pub candidates: Vec<String>,
    /// Whether the candidates were actually removed.
    pub applied: bool,
}

impl Registry {
    /// Opens an existing registry root.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::Param {
                name: "root",
                reason: format!("registry root {} does not exist", root.display()),
            });
        }
        Ok(Registry { root })
    }

    /// Creates the root directory (if needed) with an empty manifest.
    pub fn init(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let reg = Registry { root };
        if !reg.manifest_path().exists() {
            reg.write_manifest(&Manifest {
                manifest_version: MANIFEST_VERSION,
                entries: Vec::new(),
            })?;
        }
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    fn read_manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(Manifest {
                manifest_version: MANIFEST_VERSION,
                entries: Vec::new(),
            });
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            reason: format!("manifest JSON: {e}"),
        })
    }

    fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        container::atomic_write(&self.manifest_path(), &bytes)
    }

    /// Imports a checkpoint file: validates it, copies it under its
    /// content-addressed name, and records a manifest entry. Re-adding
    /// existing content is a no-op that returns the same id.
    pub fn add_checkpoint_file(&self, src: &Path) -> Result<String> {
        let ckpt = load_checkpoint(src)?;
        let id = ckpt.id();
        let _lock = LockGuard::acquire(&self.root)?;
        let mut manifest = self.read_manifest()?;
        if manifest.entries.iter().any(|e| e.checkpoint_id == id) {
            return Ok(id);
        }
        let file_name = format!("{id}.lxsc");
        let dst = self.root.join(&file_name);
        let bytes = fs::read(src).map_err(|e| Error::io(src, e))?;
        container::atomic_write(&dst, &bytes)?;
        manifest.entries.push(ManifestEntry {
            checkpoint_id: id.clone(),
            path: file_name,
            base_model_id: ckpt.base_model_id.clone(),
            created_at: unix_now(),
            byte_size: bytes.len() as u64,
        });
        self.write_manifest(&manifest)?;
        Ok(id)
    }

    /// Saves adapters straight into the registry.
    pub fn save_adapters(
        &self,
        adapters: &BTreeMap<String, LoraXsAdapter>,
        opts: &SaveOptions,
    ) -> Result<String> {
        let tmp = self.root.join(".staging.lxsc");
        let result =
            save_checkpoint(adapters, opts, &tmp).and_then(|_| self.add_checkpoint_file(&tmp));
        let _ = fs::remove_file(&tmp);
        result
    }

    /// Manifest entries, in recorded order.
    pub fn list(&self) -> Result<Vec<ManifestEntry>> {
        Ok(self.read_manifest()?.entries)
    }

    /// Re-checksums every manifest entry and cross-checks sizes and ids.
    pub fn verify(&self) -> Result<VerifyReport> {
        let manifest = self.read_manifest()?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for entry in manifest.entries {
            let path = self.root.join(&entry.path);
            let status = if !path.exists() {
                VerifyStatus::MissingFile
            } else {
                let file_len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
                if file_len != entry.byte_size {
                    VerifyStatus::SizeMismatch {
                        manifest: entry.byte_size,
                        file: file_len,
                    }
                } else {
                    match load_checkpoint(&path) {
                        Ok(ckpt) if ckpt.id() == entry.checkpoint_id => VerifyStatus::Ok,
                        Ok(ckpt) => VerifyStatus::Corrupt(format!(
                            "content id {} does not match manifest id",
                            ckpt.id()
                        )),
                        Err(e) => VerifyStatus::Corrupt(e.to_string()),
                    }
                }
            };
            entries.push((entry, status));
        }
        Ok(VerifyReport { entries })
    }

    /// Finds (and with `apply` removes) checkpoint files the manifest does
    /// not reference. Dry run by default.
    pub fn gc(&self, apply: bool) -> Result<GcReport> {
        let manifest = self.read_manifest()?;
        let referenced: std::collections::BTreeSet<&str> =
            manifest.entries.iter().map(|e| e.path.as_str()).collect();
        let mut candidates = Vec::new();
        let iter = fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        for dirent in iter {
            let dirent = dirent.map_err(|e| Error::io(&self.root, e))?;
            let name = dirent.file_name().to_string_lossy().into_owned();
            if name.ends_with(".lxsc") && !referenced.contains(name.as_str()) {
                candidates.push(name);
            }
        }
        candidates.sort();
        if apply && !candidates.is_empty() {
            let _lock = LockGuard::acquire(&self.root)?;
            for name in &candidates {
                let path = self.root.join(name);
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(GcReport {
            candidates,
            applied: apply,
        })
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
