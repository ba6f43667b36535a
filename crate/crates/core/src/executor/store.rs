//! Write-once artifact store shared by all runs.
//!
//! Artifact files (`runs/<run_id>/artifacts/<artifact_id>`) hold one JSON
//! header line ([`ArtifactMeta`]) followed by the serialized value.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::protocol::{Value, ValueKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Producer {
    pub run_id: String,
    pub node_id: String,
    pub port: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub artifact_id: String,
    pub producer: Producer,
    pub kind: ValueKind,
    /// sha256 of the canonical value JSON.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub meta: ArtifactMeta,
    pub value: Value,
}

impl Artifact {
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.push(b'\n');
        out.extend_from_slice(self.value.to_canonical_json().as_bytes());
        out
    }

    pub fn from_file_bytes(bytes: &[u8]) -> io::Result<Self> {
        let invalid = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        let split = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| invalid("missing header line".into()))?;
        let meta = serde_json::from_slice(&bytes[..split]).map_err(|e| invalid(e.to_string()))?;
        let value = serde_json::from_slice(&bytes[split + 1..]).map_err(|e| invalid(e.to_string()))?;
        Ok(Artifact { meta, value })
    }
}

pub fn content_hash(value: &Value) -> String {
    hex::encode(Sha256::digest(value.to_canonical_json().as_bytes()))
}

/// Producer node and port are part of the id; the run id is not, so
/// re-running a deterministic graph reproduces the same ids.
pub fn artifact_id(node_id: &str, port: &str, value: &Value) -> String {
    let mut h = Sha256::new();
    h.update(node_id.as_bytes());
    h.update([0u8]);
    h.update(port.as_bytes());
    h.update([0u8]);
    h.update(value.to_canonical_json().as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Default)]
pub struct ObjectStore {
    entries: RwLock<HashMap<String, Arc<Artifact>>>,
    runs_dir: Option<PathBuf>,
}

impl ObjectStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Persists artifacts under `<runs_dir>/<run_id>/artifacts/`.
    pub fn persistent(runs_dir: impl Into<PathBuf>) -> Self {
        ObjectStore { entries: RwLock::default(), runs_dir: Some(runs_dir.into()) }
    }

    pub fn runs_dir(&self) -> Option<&Path> {
        self.runs_dir.as_deref()
    }

    /// Stores `value`; an existing entry with the same id is kept as is.
    pub fn put(&self, run_id: &str, node_id: &str, port: &str, value: Value) -> io::Result<String> {
        let id = artifact_id(node_id, port, &value);
        let artifact = {
            let mut entries = self.entries.write();
            entries
                .entry(id.clone())
                .or_insert_with(|| {
                    Arc::new(Artifact {
                        meta: ArtifactMeta {
                            artifact_id: id.clone(),
                            producer: Producer {
                                run_id: run_id.to_string(),
                                node_id: node_id.to_string(),
                                port: port.to_string(),
                            },
                            kind: value.kind(),
                            content_hash: content_hash(&value),
                        },
                        value,
                    })
                })
                .clone()
        };
        if let Some(root) = &self.runs_dir {
            let dir = root.join(run_id).join("artifacts");
            let path = dir.join(&id);
            if !path.exists() {
                fs::create_dir_all(&dir)?;
                let tmp = dir.join(format!(".{id}.tmp"));
                fs::write(&tmp, artifact.to_file_bytes())?;
                fs::rename(tmp, path)?;
            }
        }
        Ok(id)
    }

    pub fn get(&self, artifact_id: &str) -> Option<Arc<Artifact>> {
        if let Some(found) = self.entries.read().get(artifact_id) {
            return Some(found.clone());
        }
        self.find_on_disk(artifact_id)
    }

    pub fn contains(&self, artifact_id: &str) -> bool {
        self.get(artifact_id).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn find_on_disk(&self, artifact_id: &str) -> Option<Arc<Artifact>> {
        if !artifact_id.chars().all(|c| c.is_ascii_hexdigit()) {
            return None;
        }
        let root = self.runs_dir.as_ref()?;
        for run in fs::read_dir(root).ok()?.flatten() {
            let path = run.path().join("artifacts").join(artifact_id);
            if let Ok(bytes) = fs::read(&path) {
                let artifact = Arc::new(Artifact::from_file_bytes(&bytes).ok()?);
                self.entries.write().insert(artifact_id.to_string(), artifact.clone());
                return Some(artifact);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_depend_on_producer_not_run() {
        let store = ObjectStore::in_memory();
        let a = store.put("r1", "n", "out", Value::text("x")).unwrap();
        let b = store.put("r2", "n", "out", Value::text("x")).unwrap();
        let c = store.put("r1", "m", "out", Value::text("x")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(store.len(), 2);
        // first writer wins
        assert_eq!(store.get(&a).unwrap().meta.producer.run_id, "r1");
        assert_eq!(store.get(&a).unwrap().meta.content_hash, store.get(&c).unwrap().meta.content_hash);
    }

    #[test]
    fn persisted_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::persistent(dir.path());
        let id = store.put("run_1", "n", "out", Value::Integer(7)).unwrap();
        let bytes = fs::read(dir.path().join("run_1").join("artifacts").join(&id)).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        let (header, body) = text.split_once('\n').unwrap();
        assert!(header.contains(&id));
        assert_eq!(body, r#"{"kind":"integer","payload":7}"#);
        assert_eq!(Artifact::from_file_bytes(&bytes).unwrap().value, Value::Integer(7));

        let reopened = ObjectStore::persistent(dir.path());
        assert_eq!(reopened.get(&id).unwrap().value, Value::Integer(7));
        assert!(reopened.get("../etc").is_none());
    }
}
