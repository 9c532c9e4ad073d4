//! Content-addressed artifact storage.
//!
//! Blobs live at `{root}/blobs/{sha256}` and never change once written. A
//! single `index.json` maps scene ids to named artifact references and is
//! replaced atomically on every update.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("blob"),
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    pub hash: String,
    pub media_type: String,
    pub size: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    blobs: BTreeMap<String, String>,
    scenes: BTreeMap<String, BTreeMap<String, ArtifactRef>>,
}

#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    index: Mutex<Index>,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("blobs")).map_err(|e| Error::io(&root, e))?;
        let index_path = root.join("index.json");
        let index = match std::fs::read(&index_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Index::default(),
            Err(e) => return Err(Error::io(&index_path, e)),
        };
        Ok(Self {
            root,
            index: Mutex::new(index),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join("blobs").join(hash)
    }

    fn persist(&self, index: &Index) -> Result<()> {
        write_atomic(&self.root.join("index.json"), &serde_json::to_vec_pretty(index)?)
    }

    /// Stores a blob and returns its reference. Writing identical bytes again is a no-op.
    pub fn put(&self, name: &str, bytes: &[u8], media_type: &str) -> Result<ArtifactRef> {
        let hash = sha256_hex(bytes);
        let path = self.blob_path(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        let mut index = self.index.lock().unwrap();
        if index.blobs.get(&hash).map(String::as_str) != Some(media_type) {
            index.blobs.insert(hash.clone(), media_type.to_owned());
            self.persist(&index)?;
        }
        Ok(ArtifactRef {
            name: name.to_owned(),
            hash,
            media_type: media_type.to_owned(),
            size: bytes.len() as u64,
        })
    }

    /// Reads a blob, re-verifying its digest.
    pub fn get(&self, hash: &str) -> Result<(Vec<u8>, String)> {
        let media_type = self
            .index
            .lock()
            .unwrap()
            .blobs
            .get(hash)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("artifact {hash}")))?;
        let path = self.blob_path(hash);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != hash {
            return Err(Error::ContractViolation(format!(
                "blob {hash} does not match its digest"
            )));
        }
        Ok((bytes, media_type))
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.index.lock().unwrap().blobs.contains_key(hash)
    }

    /// Records artifact references under a scene; only existing blobs are accepted.
    pub fn link(&self, scene_id: &str, refs: &[ArtifactRef]) -> Result<()> {
        let mut index = self.index.lock().unwrap();
        for r in refs {
            if !index.blobs.contains_key(&r.hash) {
                return Err(Error::NotFound(format!("artifact {}", r.hash)));
            }
        }
        let entry = index.scenes.entry(scene_id.to_owned()).or_default();
        for r in refs {
            entry.insert(r.name.clone(), r.clone());
        }
        self.persist(&index)
    }

    pub fn scene_artifacts(&self, scene_id: &str) -> BTreeMap<String, ArtifactRef> {
        self.index
            .lock()
            .unwrap()
            .scenes
            .get(scene_id)
            .cloned()
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_content_addressed_and_verified() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let a = store.put("render.png", b"hello", "image/png").unwrap();
        let again = store.put("other", b"hello", "image/png").unwrap();
        assert_eq!(a.hash, again.hash);
        assert_eq!(store.get(&a.hash).unwrap(), (b"hello".to_vec(), "image/png".into()));

        store.link("s1", std::slice::from_ref(&a)).unwrap();
        let reopened = ArtifactStore::open(dir.path()).unwrap();
        assert_eq!(reopened.scene_artifacts("s1")["render.png"], a);

        std::fs::write(dir.path().join("blobs").join(&a.hash), b"tampered").unwrap();
        assert!(reopened.get(&a.hash).is_err());
        assert!(matches!(reopened.get("deadbeef"), Err(Error::NotFound(_))));
    }

    #[test]
    fn link_rejects_unknown_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let bogus = ArtifactRef {
            name: "x".into(),
            hash: "00".into(),
            media_type: "image/png".into(),
            size: 0,
        };
        assert!(store.link("s", &[bogus]).is_err());
    }
}
