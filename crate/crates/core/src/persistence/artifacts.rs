// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use parking_lot::RwLock;

use super::StoreError;

pub const TRAJECTORY_ARTIFACT: &str = "trajectory.jsonl";
pub const RESULT_ARTIFACT: &str = "result.json";
pub const METRICS_ARTIFACT: &str = "metrics.json";

/// `runs/<run_id>/tasks/<task_id>/<name>`
pub fn task_artifact_key(run_id: &str, task_id: &str, name: &str) -> String {
    format!("runs/{run_id}/tasks/{task_id}/{name}")
}

pub fn run_artifact_key(run_id: &str, name: &str) -> String {
    format!("runs/{run_id}/{name}")
}

enum Backing {
    Dir(PathBuf),
    Memory(RwLock<BTreeMap<String, Vec<u8>>>),
}

/// Write-once object store. Objects become visible atomically.
pub struct ArtifactStore {
    backing: Backing,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { backing: Backing::Dir(root) })
    }

    pub fn in_memory() -> Self {
        Self { backing: Backing::Memory(RwLock::new(BTreeMap::new())) }
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.backing {
            Backing::Dir(p) => Some(p),
            Backing::Memory(_) => None,
        }
    }

    pub fn put_artifact(&self, key: &str, bytes: &[u8]) -> Result<String, StoreError> {
        self.put_from_reader(key, bytes)
    }

    /// Streams `reader` into a temporary object and publishes it under `key`
    /// only once the stream completes. A failing reader leaves no trace.
    pub fn put_from_reader(&self, key: &str, mut reader: impl Read) -> Result<String, StoreError> {
        validate_key(key)?;
        match &self.backing {
            Backing::Memory(map) => {
                if map.read().contains_key(key) {
                    return Err(StoreError::KeyExists(key.to_string()));
                }
                let mut buf = Vec::new();
                reader.read_to_end(&mut buf)?;
                let mut map = map.write();
                if map.contains_key(key) {
                    return Err(StoreError::KeyExists(key.to_string()));
                }
                map.insert(key.to_string(), buf);
            }
            Backing::Dir(root) => {
                let path = root.join(key);
                if path.exists() {
                    return Err(StoreError::KeyExists(key.to_string()));
                }
                let parent = path.parent().expect("validated keys have a parent");
                std::fs::create_dir_all(parent)?;
                let mut tmp = tempfile::Builder::new().prefix(".partial-").tempfile_in(parent)?;
                io::copy(&mut reader, &mut tmp)?;
                tmp.as_file_mut().flush()?;
                tmp.as_file().sync_all()?;
                tmp.persist_noclobber(&path).map_err(|e| {
                    if e.error.kind() == io::ErrorKind::AlreadyExists {
                        StoreError::KeyExists(key.to_string())
                    } else {
                        StoreError::Io(e.error.to_string())
                    }
                })?;
            }
        }
        Ok(key.to_string())
    }

    pub fn get_artifact(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        validate_key(key)?;
        match &self.backing {
            Backing::Memory(map) => map.read().get(key).cloned().ok_or_else(|| StoreError::KeyNotFound(key.to_string())),
            Backing::Dir(root) => match std::fs::read(root.join(key)) {
                Ok(b) => Ok(b),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::KeyNotFound(key.to_string())),
                Err(e) => Err(e.into()),
            },
        }
    }

    pub fn exists(&self, key: &str) -> bool {
        if validate_key(key).is_err() {
            return false;
        }
        match &self.backing {
            Backing::Memory(map) => map.read().contains_key(key),
            Backing::Dir(root) => root.join(key).is_file(),
        }
    }

    /// Published keys under `prefix`, sorted.
    pub fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        match &self.backing {
            Backing::Memory(map) => Ok(map.read().keys().filter(|k| k.starts_with(prefix)).cloned().collect()),
            Backing::Dir(root) => {
                let mut out = Vec::new();
                collect_files(root, root, &mut out)?;
                out.retain(|k| k.starts_with(prefix));
                out.sort();
                Ok(out)
            }
        }
    }
}

impl std::fmt::Debug for ArtifactStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.backing {
            Backing::Dir(p) => write!(f, "ArtifactStore({})", p.display()),
            Backing::Memory(_) => f.write_str("ArtifactStore(memory)"),
        }
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
        } else if !entry.file_name().to_string_lossy().starts_with(".partial-") {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn validate_key(key: &str) -> Result<(), StoreError> {
    let bad = key.is_empty()
        || key.starts_with('/')
        || key.contains('\\')
        || key.split('/').any(|seg| seg.is_empty() || seg == "." || seg == ".." || seg.starts_with(".partial-"));
    if bad {
        Err(StoreError::InvalidKey(key.to_string()))
    } else {
        Ok(())
    }
}
