//! Append-only result store: `records.jsonl` plus `artifacts/{id}/`.
//!
//! Artifacts are written before their record is appended, so every record
//! visible to readers has its files on disk.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::pipeline::{ClassScores, FilterScores, Stage, Summary};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const ARTIFACTS_DIR: &str = "artifacts";
pub const CAM_FILE: &str = "cam.png";
pub const OVERLAY_FILE: &str = "overlay.png";
/// Stem of the stored upload copy; the original extension is kept.
pub const UPLOAD_STEM: &str = "upload";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub request_id: String,
    pub original_filename: String,
    pub received_at: DateTime<Utc>,
    pub completed_at: DateTime<Utc>,
    pub valid: bool,
    pub filter_scores: FilterScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_scores: Option<ClassScores>,
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cam_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay_url: Option<String>,
    /// Stages that ran, in order.
    pub pipeline: Vec<Stage>,
    pub upload_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

impl AnalysisResult {
    /// Files under the artifact directory this record refers to.
    pub fn artifact_files(&self) -> Vec<&str> {
        let mut files = vec![self.upload_file.as_str()];
        if self.cam_url.is_some() {
            files.extend([CAM_FILE, OVERLAY_FILE]);
        }
        files
    }
}

#[derive(Default)]
struct Index {
    /// Insertion order.
    order: Vec<Arc<AnalysisResult>>,
    by_id: HashMap<String, Arc<AnalysisResult>>,
    by_key: HashMap<String, String>,
}

impl Index {
    fn insert(&mut self, r: Arc<AnalysisResult>) {
        if let Some(k) = &r.idempotency_key {
            self.by_key.insert(k.clone(), r.request_id.clone());
        }
        self.by_id.insert(r.request_id.clone(), r.clone());
        self.order.push(r);
    }
}

pub struct ResultStore {
    root: PathBuf,
    retention: Option<usize>,
    index: RwLock<Index>,
    /// Serializes appends and rewrites of the records file.
    writer: Mutex<()>,
}

impl ResultStore {
    /// Opens (creating if needed) the store under `root` and replays its
    /// records. Lines that fail to parse or whose artifacts are gone are
    /// skipped with a warning.
    pub fn open(root: &Path, retention: Option<usize>) -> Result<Self, ServiceError> {
        let artifacts = root.join(ARTIFACTS_DIR);
        std::fs::create_dir_all(&artifacts).map_err(|e| ServiceError::store(&artifacts, e))?;
        let store = Self {
            root: root.to_path_buf(),
            retention,
            index: RwLock::new(Index::default()),
            writer: Mutex::new(()),
        };
        let path = store.records_path();
        if path.exists() {
            let f = std::fs::File::open(&path).map_err(|e| ServiceError::store(&path, e))?;
            let mut index = store.index.write().expect("store index poisoned");
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| ServiceError::store(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<AnalysisResult>(&line) {
                    Ok(r) if store.artifacts_present(&r) => index.insert(Arc::new(r)),
                    Ok(r) => tracing::warn!(line = n + 1, id = %r.request_id, "record without artifacts skipped"),
                    Err(e) => tracing::warn!(line = n + 1, error = %e, "unreadable record skipped"),
                }
            }
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records_path(&self) -> PathBuf {
        self.root.join(RECORDS_FILE)
    }

    /// Directory holding the artifacts of `request_id`.
    pub fn artifact_dir(&self, request_id: &str) -> PathBuf {
        self.root.join(ARTIFACTS_DIR).join(request_id)
    }

    fn artifacts_present(&self, r: &AnalysisResult) -> bool {
        let dir = self.artifact_dir(&r.request_id);
        r.artifact_files().iter().all(|f| dir.join(f).is_file())
    }

    pub fn write_artifact(&self, request_id: &str, name: &str, bytes: &[u8]) -> Result<PathBuf, ServiceError> {
        let dir = self.artifact_dir(request_id);
        std::fs::create_dir_all(&dir).map_err(|e| ServiceError::store(&dir, e))?;
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| ServiceError::store(&path, e))?;
        Ok(path)
    }

    /// Appends `result`; its artifacts must already be written. A result
    /// whose idempotency key is already stored is not appended again and
    /// the earlier record is returned instead.
    pub fn append(&self, result: AnalysisResult) -> Result<Arc<AnalysisResult>, ServiceError> {
        let _guard = self.writer.lock().expect("store writer poisoned");
        if let Some(existing) = result.idempotency_key.as_deref().and_then(|k| self.by_idempotency_key(k)) {
            return Ok(existing);
        }
        if !self.artifacts_present(&result) {
            return Err(ServiceError::store(
                self.artifact_dir(&result.request_id),
                std::io::Error::new(std::io::ErrorKind::NotFound, "artifacts missing"),
            ));
        }
        let path = self.records_path();
        let mut line = serde_json::to_string(&result)?;
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| ServiceError::store(&path, e))?;
        let result = Arc::new(result);
        self.index.write().expect("store index poisoned").insert(result.clone());
        self.enforce_retention()?;
        Ok(result)
    }

    /// Drops the oldest records beyond the retention limit together with
    /// their artifacts. Caller holds the writer lock.
    fn enforce_retention(&self) -> Result<(), ServiceError> {
        let Some(limit) = self.retention else {
            return Ok(());
        };
        let evicted: Vec<Arc<AnalysisResult>> = {
            let mut index = self.index.write().expect("store index poisoned");
            if index.order.len() <= limit {
                return Ok(());
            }
            let excess = index.order.len() - limit;
            let evicted: Vec<_> = index.order.drain(..excess).collect();
            for r in &evicted {
                index.by_id.remove(&r.request_id);
                if let Some(k) = &r.idempotency_key {
                    index.by_key.remove(k);
                }
            }
            evicted
        };
        let path = self.records_path();
        let tmp = self.root.join(format!("{RECORDS_FILE}.tmp"));
        let mut body = String::new();
        for r in self.index.read().expect("store index poisoned").order.iter() {
            body.push_str(&serde_json::to_string(r.as_ref())?);
            body.push('\n');
        }
        std::fs::write(&tmp, body).map_err(|e| ServiceError::store(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| ServiceError::store(&path, e))?;
        for r in evicted {
            let dir = self.artifact_dir(&r.request_id);
            if let Err(e) = std::fs::remove_dir_all(&dir) {
                tracing::warn!(dir = %dir.display(), error = %e, "could not remove evicted artifacts");
            }
        }
        Ok(())
    }

    pub fn get(&self, request_id: &str) -> Option<Arc<AnalysisResult>> {
        self.index.read().expect("store index poisoned").by_id.get(request_id).cloned()
    }

    pub fn by_idempotency_key(&self, key: &str) -> Option<Arc<AnalysisResult>> {
        let index = self.index.read().expect("store index poisoned");
        index.by_key.get(key).and_then(|id| index.by_id.get(id)).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("store index poisoned").order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// At most `limit` records, newest `completed_at` first, ties by
    /// ascending request id.
    pub fn history(&self, limit: usize) -> Vec<Arc<AnalysisResult>> {
        let mut all: Vec<_> = self.index.read().expect("store index poisoned").order.clone();
        all.sort_by(|a, b| {
            b.completed_at
                .cmp(&a.completed_at)
                .then_with(|| a.request_id.cmp(&b.request_id))
        });
        all.truncate(limit);
        all
    }

    /// Checks that a file can be created in the store and that the records
    /// file accepts appends.
    pub fn probe_writable(&self) -> Result<(), String> {
        let probe = self.root.join(format!(".probe-{}", uuid::Uuid::new_v4()));
        std::fs::write(&probe, b"ok").map_err(|e| format!("cannot write {}: {e}", probe.display()))?;
        let _ = std::fs::remove_file(&probe);
        let path = self.records_path();
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map(drop)
            .map_err(|e| format!("cannot append to {}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn record(id: &str, second: u32, key: Option<&str>) -> AnalysisResult {
        let t = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, second).unwrap();
        AnalysisResult {
            request_id: id.into(),
            original_filename: "x.png".into(),
            received_at: t,
            completed_at: t,
            valid: false,
            filter_scores: FilterScores {
                valid: 0.1,
                nonvalid: 0.9,
            },
            class_scores: None,
            summary: Summary::InvalidImage,
            cam_url: None,
            overlay_url: None,
            pipeline: vec![Stage::ExtensionCheck, Stage::Decode, Stage::Filter],
            upload_file: "upload.png".into(),
            idempotency_key: key.map(Into::into),
        }
    }

    fn put(store: &ResultStore, r: AnalysisResult) -> Arc<AnalysisResult> {
        store.write_artifact(&r.request_id, &r.upload_file, b"png").unwrap();
        store.append(r).unwrap()
    }

    #[test]
    fn history_orders_newest_first_with_id_ties() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path(), None).unwrap();
        assert!(store.history(5).is_empty());
        for (id, s) in [("b", 1), ("a", 3), ("c", 3), ("d", 2)] {
            put(&store, record(id, s, None));
        }
        let ids: Vec<String> = store.history(3).iter().map(|r| r.request_id.clone()).collect();
        assert_eq!(ids, ["a", "c", "d"]);
    }

    #[test]
    fn records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let stored = {
            let store = ResultStore::open(dir.path(), None).unwrap();
            put(&store, record("r1", 0, Some("k")))
        };
        let store = ResultStore::open(dir.path(), None).unwrap();
        assert_eq!(store.get("r1").unwrap(), stored);
        assert_eq!(store.by_idempotency_key("k").unwrap().request_id, "r1");
    }

    #[test]
    fn append_requires_artifacts_and_dedupes_keys() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path(), None).unwrap();
        assert!(store.append(record("bare", 0, None)).is_err());
        put(&store, record("first", 0, Some("same")));
        let again = put(&store, record("second", 1, Some("same")));
        assert_eq!(again.request_id, "first");
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn reopen_skips_records_with_missing_artifacts_or_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = ResultStore::open(dir.path(), None).unwrap();
            put(&store, record("keep", 0, None));
            put(&store, record("gone", 1, None));
            std::fs::remove_dir_all(store.artifact_dir("gone")).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(RECORDS_FILE)).unwrap();
        writeln!(f, "{{truncated").unwrap();
        let store = ResultStore::open(dir.path(), None).unwrap();
        assert_eq!(store.len(), 1);
        assert!(store.get("keep").is_some());
    }

    #[test]
    fn retention_evicts_oldest_with_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path(), Some(2)).unwrap();
        for (i, id) in ["r0", "r1", "r2"].iter().enumerate() {
            put(&store, record(id, i as u32, None));
        }
        assert!(store.get("r0").is_none());
        assert!(!store.artifact_dir("r0").exists());
        let reopened = ResultStore::open(dir.path(), Some(2)).unwrap();
        assert_eq!(reopened.len(), 2);
    }

    #[test]
    fn probe_detects_unappendable_records_file() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path(), None).unwrap();
        assert!(store.probe_writable().is_ok());
        std::fs::remove_file(store.records_path()).unwrap();
        std::fs::create_dir(store.records_path()).unwrap();
        assert!(store.probe_writable().is_err());
    }
}
