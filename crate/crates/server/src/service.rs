use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::sync::{Arc, Mutex};

use axum::http::StatusCode;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use altar_core::blob::{BlobError, BlobOwner, BlobStore, BlobUid, StagedObject, StagingFile};
use altar_core::hash::is_sha256_hex;
use altar_core::integrity::{scan_integrity, IntegrityReport};
use altar_core::model::{
    capture_host, count_by_experiment, transition, validate_config, Annotation, ArtifactKind,
    ArtifactRef, ConfigDocument, HostInfo, MetricSeries, RawNode, RunEvent, RunRecord, RunStatus,
    SourceFile,
};
use altar_core::store::{Collection, DocStore, JsonFilter, SortKey, StoreError};
use altar_core::Timestamp;

use crate::clock::Clock;
use crate::config::ServiceConfig;
use crate::error::ApiError;

/// Appended to `captured_out` when it was cut at the configured cap.
pub const TRUNCATION_MARKER: &str = "\n[altar: output truncated]\n";

/// Page size of `GET /api/runs` when `limit` is not given.
pub const DEFAULT_PAGE_SIZE: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot create data directory: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Blob(#[from] BlobError),
}

/// Query-string parameters of `GET /api/runs`.
#[derive(Debug, Default, Clone, Deserialize)]
pub struct RunQuery {
    pub filter: Option<String>,
    pub sort: Option<String>,
    pub skip: Option<String>,
    pub limit: Option<String>,
}

pub enum ArtifactContent {
    Inline(Vec<u8>),
    Blob(BlobUid),
}

/// The run lifecycle on top of the document and blob stores.
///
/// Every method is synchronous and may block on disk I/O.
pub struct Service {
    db: DocStore,
    blobs: BlobStore,
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    run_locks: Mutex<HashMap<i64, Arc<tokio::sync::Mutex<()>>>>,
}

fn bad(message: impl std::fmt::Display) -> ApiError {
    ApiError::bad_request(message.to_string())
}

fn optional<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

fn as_object(body: &Value) -> Result<&serde_json::Map<String, Value>, ApiError> {
    body.as_object().ok_or_else(|| bad("request body must be a JSON object"))
}

/// Cuts `out` to at most `cap` bytes on a character boundary and marks the cut.
pub fn truncate_output(out: &str, cap: usize) -> String {
    if out.len() <= cap {
        return out.to_string();
    }
    let mut end = cap;
    while !out.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}{TRUNCATION_MARKER}", &out[..end])
}

/// Artifact names are relative paths: non-empty `/`-separated segments, no `.`/`..`.
pub fn check_artifact_name(name: &str) -> Result<(), ApiError> {
    let ok = !name.is_empty()
        && name.len() <= 1024
        && !name.contains(['\\', '\0'])
        && name.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..");
    if ok {
        Ok(())
    } else {
        Err(bad(format!("invalid artifact name {name:?}")))
    }
}

impl Service {
    pub fn open(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, StartupError> {
        config.validate().map_err(StartupError::Config)?;
        std::fs::create_dir_all(&config.data_dir)?;
        let db = DocStore::open(config.data_dir.join("db"))?;
        let blobs = BlobStore::open(config.data_dir.join("lfs"))?;
        blobs.cleanup_staging()?;
        Ok(Self { db, blobs, config, clock, run_locks: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn db(&self) -> &DocStore {
        &self.db
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Serializes writes to one run, including the upload phase of artifacts.
    pub fn run_lock(&self, run_id: i64) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.run_locks.lock().expect("run lock table poisoned");
        Arc::clone(locks.entry(run_id).or_default())
    }

    fn load_run(&self, run_id: i64) -> Result<RunRecord, ApiError> {
        let doc = self.db.get(Collection::Runs, run_id)?;
        RunRecord::from_document(&doc)
            .map_err(|e| ApiError::internal(format!("run {run_id} is unreadable: {e}")))
    }

    fn load_running(&self, run_id: i64) -> Result<RunRecord, ApiError> {
        let run = self.load_run(run_id)?;
        if run.status.is_terminal() {
            return Err(ApiError::immutable(run_id));
        }
        Ok(run)
    }

    fn store_run(&self, run: &RunRecord) -> Result<(), ApiError> {
        Ok(self.db.update(Collection::Runs, run.run_id, run.to_document())?)
    }

    /// Adds the derived `stale` flag to a stored run document.
    pub fn decorate(&self, mut doc: Value) -> Value {
        let heartbeat = doc.get("heartbeat").and_then(Value::as_str).and_then(|s| s.parse::<Timestamp>().ok());
        let running = doc.get("status").and_then(Value::as_str) == Some(RunStatus::Running.as_str());
        let stale = match heartbeat {
            Some(hb) if running => {
                self.now().secs_since(&hb) > i64::try_from(self.config.heartbeat_stale_secs).unwrap_or(i64::MAX)
            }
            _ => false,
        };
        if let Value::Object(map) = &mut doc {
            map.insert("stale".into(), Value::Bool(stale));
        }
        doc
    }

    pub fn check_exists(&self, run_id: i64) -> Result<(), ApiError> {
        self.db.get(Collection::Runs, run_id)?;
        Ok(())
    }

    pub fn create_run(&self, body: &Value) -> Result<i64, ApiError> {
        let obj = as_object(body)?;
        let experiment_name = match obj.get("experiment_name") {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            _ => return Err(bad("experiment_name must be a non-empty string")),
        };
        let config = match optional(obj, "config") {
            None => ConfigDocument::empty(),
            Some(v) => validate_config(&RawNode::from(v))?,
        };
        let now = self.now();
        let host = match optional(obj, "host") {
            None => HostInfo { captured_at: now, ..capture_host() },
            Some(v) => {
                let host: HostInfo = serde_json::from_value(v.clone()).map_err(|e| bad(format!("host: {e}")))?;
                host.check(&now).map_err(bad)?;
                host
            }
        };
        let sources: Vec<SourceFile> = match optional(obj, "sources") {
            None => Vec::new(),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| bad(format!("sources: {e}")))?,
        };
        if let Some(s) = sources.iter().find(|s| !is_sha256_hex(&s.sha256)) {
            return Err(bad(format!("sources: {:?} has no valid sha256", s.path)));
        }
        let ingest_fingerprint = match optional(obj, "ingest_fingerprint") {
            None => None,
            Some(Value::String(fp)) if is_sha256_hex(fp) => Some(fp.clone()),
            Some(_) => return Err(bad("ingest_fingerprint must be a SHA-256 hex digest")),
        };

        let run_id = self.db.allocate_run_id()?;
        let run = RunRecord {
            run_id,
            experiment_name,
            config,
            host,
            status: RunStatus::Running,
            start_time: now,
            stop_time: None,
            heartbeat: now,
            result: None,
            captured_out: String::new(),
            artifacts: Vec::new(),
            metric_names: Vec::new(),
            sources,
            ingest_fingerprint,
        };
        self.db.insert_at(Collection::Runs, run_id, run.to_document())?;
        Ok(run_id)
    }

    fn find_series(&self, run_id: i64, name: &str) -> Result<Option<(i64, MetricSeries)>, ApiError> {
        let filter = JsonFilter::all().eq("run_id", run_id).eq("name", name);
        match self.db.find(Collection::Metrics, &filter).into_iter().next() {
            None => Ok(None),
            Some((id, doc)) => serde_json::from_value(doc)
                .map(|series| Some((id, series)))
                .map_err(|e| ApiError::internal(format!("metric {name:?} of run {run_id} is unreadable: {e}"))),
        }
    }

    /// Appends a batch of points. The batch is validated as a whole before anything is written.
    pub fn log_metrics(&self, run_id: i64, body: &Value) -> Result<usize, ApiError> {
        let points = body.as_array().ok_or_else(|| bad("request body must be a JSON list of points"))?;
        let mut run = self.load_running(run_id)?;
        let now = self.now();

        let mut touched: BTreeMap<String, (Option<i64>, MetricSeries)> = BTreeMap::new();
        for (i, point) in points.iter().enumerate() {
            let p = point.as_object().ok_or_else(|| bad(format!("point {i} is not an object")))?;
            let name = match p.get("name") {
                Some(Value::String(s)) if !s.is_empty() => s.as_str(),
                _ => return Err(bad(format!("point {i}: name must be a non-empty string"))),
            };
            let number = |key: &str| {
                p.get(key).and_then(Value::as_f64).ok_or_else(|| bad(format!("point {i}: {key} must be a number")))
            };
            let (step, value) = (number("step")?, number("value")?);
            let at = match optional(p, "timestamp") {
                None => now,
                Some(Value::String(s)) => s.parse().map_err(|e| bad(format!("point {i}: timestamp: {e}")))?,
                Some(_) => return Err(bad(format!("point {i}: timestamp must be an RFC 3339 string"))),
            };
            if !touched.contains_key(name) {
                let entry = match self.find_series(run_id, name)? {
                    Some((id, series)) => (Some(id), series),
                    None => (None, MetricSeries::new(run_id, name)),
                };
                touched.insert(name.to_string(), entry);
            }
            touched.get_mut(name).expect("entry inserted above").1.push(step, value, at)?;
        }

        for (name, (id, series)) in touched {
            let doc = serde_json::to_value(&series).expect("metric series serializes");
            match id {
                Some(id) => self.db.update(Collection::Metrics, id, doc)?,
                None => {
                    self.db.insert(Collection::Metrics, doc)?;
                }
            }
            if !run.metric_names.contains(&name) {
                run.metric_names.push(name);
            }
        }
        run.heartbeat = now;
        self.store_run(&run)?;
        Ok(points.len())
    }

    /// Opens a staging file for an artifact upload, refusing early when the run is not writable.
    pub fn begin_artifact(&self, run_id: i64) -> Result<StagingFile, ApiError> {
        self.load_running(run_id)?;
        Ok(self.blobs.begin_staging()?)
    }

    /// Routes a fully staged upload by size and records it on the run.
    pub fn attach_artifact(
        &self,
        run_id: i64,
        name: &str,
        media_type: &str,
        staged: StagedObject,
    ) -> Result<ArtifactRef, ApiError> {
        check_artifact_name(name)?;
        let mut run = self.load_running(run_id)?;
        if run.artifact(name).is_some() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "DuplicateName",
                format!("run {run_id} already has an artifact named {name:?}"),
            ));
        }
        let size_bytes = staged.size();
        let content_hash = staged.uid().to_string();
        let artifact = if size_bytes > self.config.large_file_threshold_bytes {
            let owner = BlobOwner {
                run_id,
                experiment_name: run.experiment_name.clone(),
                original_filename: name.to_string(),
                config_snapshot: run.config.clone(),
            };
            let uid = self.blobs.commit(staged, owner)?;
            ArtifactRef {
                name: name.to_string(),
                kind: ArtifactKind::Blob,
                size_bytes,
                content_hash,
                blob_uid: Some(uid.to_string()),
                media_type: media_type.to_string(),
            }
        } else {
            let bytes = staged.read_all()?;
            staged.discard()?;
            self.db.insert(
                Collection::Files,
                json!({
                    "run_id": run_id,
                    "name": name,
                    "media_type": media_type,
                    "content_hash": content_hash,
                    "size_bytes": size_bytes,
                    "data": BASE64.encode(&bytes),
                }),
            )?;
            ArtifactRef {
                name: name.to_string(),
                kind: ArtifactKind::Inline,
                size_bytes,
                content_hash,
                blob_uid: None,
                media_type: media_type.to_string(),
            }
        };
        run.artifacts.push(artifact.clone());
        run.heartbeat = self.now();
        self.store_run(&run)?;
        Ok(artifact)
    }

    pub fn artifact_content(&self, run_id: i64, name: &str) -> Result<(ArtifactRef, ArtifactContent), ApiError> {
        let run = self.load_run(run_id)?;
        let artifact = run
            .artifact(name)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("run {run_id} has no artifact {name:?}")))?;
        let content = match artifact.kind {
            ArtifactKind::Blob => {
                let uid = artifact.blob_uid.as_deref().unwrap_or_default();
                ArtifactContent::Blob(BlobUid::parse(uid)?)
            }
            ArtifactKind::Inline => {
                let filter = JsonFilter::all().eq("run_id", run_id).eq("name", name);
                let (_, doc) = self
                    .db
                    .find(Collection::Files, &filter)
                    .into_iter()
                    .next()
                    .ok_or_else(|| ApiError::not_found(format!("inline content of {name:?} is missing")))?;
                let data = doc.get("data").and_then(Value::as_str).unwrap_or_default();
                ArtifactContent::Inline(
                    BASE64.decode(data).map_err(|e| ApiError::internal(format!("inline content of {name:?}: {e}")))?,
                )
            }
        };
        Ok((artifact, content))
    }

    /// A reader over a stored blob and its size.
    pub fn open_blob(&self, uid: &str, verify: bool) -> Result<(Box<dyn Read + Send>, u64), ApiError> {
        let uid = BlobUid::parse(uid)?;
        let (reader, manifest) = self.blobs.get(&uid, verify)?;
        Ok((reader, manifest.size_bytes))
    }

    pub fn finish_run(&self, run_id: i64, body: &Value) -> Result<Value, ApiError> {
        let obj = as_object(body)?;
        let event: RunEvent = match obj.get("event") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|_| bad("event must be one of complete, fail, interrupt"))?,
            None => return Err(bad("event is required")),
        };
        let result = optional(obj, "result").cloned();
        if result.as_ref().is_some_and(|r| r.is_array() || r.is_object()) {
            return Err(bad("result must be a scalar"));
        }
        let captured_out = match optional(obj, "captured_out") {
            None => None,
            Some(Value::String(s)) => Some(truncate_output(s, self.config.captured_out_cap_bytes)),
            Some(_) => return Err(bad("captured_out must be a string")),
        };

        let mut run = self.load_run(run_id)?;
        run.status = transition(run.status, event)?;
        let now = self.now();
        run.stop_time = Some(now.max(run.start_time));
        run.result = result;
        if let Some(out) = captured_out {
            run.captured_out = out;
        }
        self.store_run(&run)?;
        Ok(self.decorate(run.to_document()))
    }

    pub fn heartbeat(&self, run_id: i64) -> Result<Timestamp, ApiError> {
        let mut run = self.load_running(run_id)?;
        run.heartbeat = self.now().max(run.start_time);
        self.store_run(&run)?;
        Ok(run.heartbeat)
    }

    pub fn query_runs(&self, q: &RunQuery) -> Result<Value, ApiError> {
        let filter = match q.filter.as_deref().map(str::trim) {
            None | Some("") => JsonFilter::all(),
            Some(text) => {
                let value: Value = serde_json::from_str(text).map_err(|e| bad(format!("filter: {e}")))?;
                JsonFilter::from_value(&value).map_err(|e| bad(format!("filter: {e}")))?
            }
        };
        let sort = SortKey::parse_list(q.sort.as_deref().unwrap_or("")).map_err(bad)?;
        let number = |key: &str, raw: &Option<String>, default: usize| match raw.as_deref() {
            None | Some("") => Ok(default),
            Some(s) => s.parse::<usize>().map_err(|_| bad(format!("{key} must be a non-negative integer"))),
        };
        let skip = number("skip", &q.skip, 0)?;
        let limit = number("limit", &q.limit, DEFAULT_PAGE_SIZE)?;
        let page = self.db.query(Collection::Runs, &filter, &sort, skip, limit)?;
        let runs: Vec<Value> = page.page.into_iter().map(|(_, doc)| self.decorate(doc)).collect();
        Ok(json!({"total": page.total_matched, "runs": runs}))
    }

    pub fn get_run(&self, run_id: i64) -> Result<Value, ApiError> {
        Ok(self.decorate(self.db.get(Collection::Runs, run_id)?))
    }

    pub fn get_metric(&self, run_id: i64, name: &str) -> Result<Value, ApiError> {
        self.check_exists(run_id)?;
        match self.find_series(run_id, name)? {
            Some((_, series)) => Ok(serde_json::to_value(series).expect("metric series serializes")),
            None => Err(ApiError::not_found(format!("run {run_id} has no metric {name:?}"))),
        }
    }

    pub fn experiments(&self) -> Value {
        let runs = self.db.find(Collection::Runs, &JsonFilter::all());
        let names = runs.iter().filter_map(|(_, doc)| doc.pointer("/experiment/name").and_then(Value::as_str));
        let counts = count_by_experiment(names);
        Value::Array(counts.into_iter().map(|(name, n)| json!({"name": name, "run_count": n})).collect())
    }

    /// Annotations are stored apart from the run, so terminal runs accept them too.
    pub fn annotate(&self, run_id: i64, body: &Value) -> Result<Annotation, ApiError> {
        let obj = as_object(body)?;
        let author = match obj.get("author") {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            _ => return Err(bad("author must be a non-empty string")),
        };
        let tags: Vec<String> = match optional(obj, "tags") {
            None => Vec::new(),
            Some(v) => serde_json::from_value(v.clone()).map_err(|_| bad("tags must be a list of strings"))?,
        };
        let note = match optional(obj, "note") {
            None => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(bad("note must be a string")),
        };
        self.check_exists(run_id)?;
        let annotation_id = self.db.allocate_id(Collection::Annotations)?;
        let annotation = Annotation { annotation_id, run_id, author, created_at: self.now(), tags, note };
        let doc = serde_json::to_value(&annotation).expect("annotation serializes");
        self.db.insert_at(Collection::Annotations, annotation_id, doc)?;
        Ok(annotation)
    }

    pub fn annotations(&self, run_id: i64) -> Result<Value, ApiError> {
        self.check_exists(run_id)?;
        let found = self.db.find(Collection::Annotations, &JsonFilter::all().eq("run_id", run_id));
        Ok(Value::Array(found.into_iter().map(|(_, doc)| doc).collect()))
    }

    pub fn integrity(&self) -> Result<IntegrityReport, ApiError> {
        Ok(scan_integrity(&self.blobs, &self.db)?)
    }
}
