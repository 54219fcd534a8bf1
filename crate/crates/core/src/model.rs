//! The run data model shared by every other module.
//!
//! A run is stored as one JSON document. Its configuration is an arbitrary
//! tree ([`ConfigDocument`]) whose keys must be addressable by dotted paths,
//! which is why `.` and a leading `$` are rejected at validation time.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::hash::is_sha256_hex;
use crate::time::Timestamp;

/// Maximum nesting depth of a configuration tree. The root map is depth 1.
pub const MAX_CONFIG_DEPTH: usize = 32;

/// Maximum nesting depth of a stored document (a run embeds its config one level down).
pub const MAX_DOCUMENT_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid key {key:?} at {path:?}: {reason}")]
    KeyInvalid { path: String, key: String, reason: &'static str },
    #[error("nesting depth exceeds {limit}")]
    DepthExceeded { limit: usize },
    #[error("non-finite number at {path:?}")]
    NonFiniteNumber { path: String },
    #[error("integer at {path:?} does not fit in 64 signed bits")]
    IntegerOutOfRange { path: String },
    #[error("configuration root must be a map")]
    RootNotMap,
}

/// A parsed tree as it arrives from an arbitrary source, before validation.
///
/// This is a superset of what a [`ConfigDocument`] may hold: integers of any
/// width, non-finite floats and duplicate keys are all representable here.
#[derive(Debug, Clone, PartialEq)]
pub enum RawNode {
    Null,
    Bool(bool),
    Int(i128),
    Float(f64),
    String(String),
    List(Vec<RawNode>),
    Map(Vec<(String, RawNode)>),
}

impl From<&Value> for RawNode {
    fn from(value: &Value) -> Self {
        match value {
            Value::Null => RawNode::Null,
            Value::Bool(b) => RawNode::Bool(*b),
            Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    RawNode::Int(i.into())
                } else if let Some(u) = n.as_u64() {
                    RawNode::Int(u.into())
                } else {
                    RawNode::Float(n.as_f64().unwrap_or(f64::NAN))
                }
            }
            Value::String(s) => RawNode::String(s.clone()),
            Value::Array(items) => RawNode::List(items.iter().map(RawNode::from).collect()),
            Value::Object(map) => {
                RawNode::Map(map.iter().map(|(k, v)| (k.clone(), RawNode::from(v))).collect())
            }
        }
    }
}

fn join_path(prefix: &str, segment: &str) -> String {
    if prefix.is_empty() {
        segment.to_string()
    } else {
        format!("{prefix}.{segment}")
    }
}

fn check_key(prefix: &str, key: &str) -> Result<(), ConfigError> {
    let reason = if key.is_empty() {
        "empty key"
    } else if key.contains('.') {
        "keys may not contain '.'"
    } else if key.starts_with('$') {
        "keys may not start with '$'"
    } else {
        return Ok(());
    };
    Err(ConfigError::KeyInvalid { path: prefix.to_string(), key: key.to_string(), reason })
}

fn convert(node: &RawNode, path: &str, depth: usize, limit: usize) -> Result<Value, ConfigError> {
    match node {
        RawNode::Null => Ok(Value::Null),
        RawNode::Bool(b) => Ok(Value::Bool(*b)),
        RawNode::Int(i) => i64::try_from(*i)
            .map(Value::from)
            .map_err(|_| ConfigError::IntegerOutOfRange { path: path.to_string() }),
        RawNode::Float(f) => Number::from_f64(*f)
            .map(Value::Number)
            .ok_or_else(|| ConfigError::NonFiniteNumber { path: path.to_string() }),
        RawNode::String(s) => Ok(Value::String(s.clone())),
        RawNode::List(items) => {
            if depth + 1 > limit {
                return Err(ConfigError::DepthExceeded { limit });
            }
            items
                .iter()
                .enumerate()
                .map(|(i, item)| convert(item, &join_path(path, &i.to_string()), depth + 1, limit))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        RawNode::Map(entries) => {
            if depth + 1 > limit {
                return Err(ConfigError::DepthExceeded { limit });
            }
            let mut map = Map::new();
            for (key, child) in entries {
                check_key(path, key)?;
                if map.contains_key(key) {
                    return Err(ConfigError::KeyInvalid {
                        path: path.to_string(),
                        key: key.clone(),
                        reason: "duplicate key",
                    });
                }
                let child = convert(child, &join_path(path, key), depth + 1, limit)?;
                map.insert(key.clone(), child);
            }
            Ok(Value::Object(map))
        }
    }
}

/// Checks that `raw` is storable as a configuration and returns the validated tree.
pub fn validate_config(raw: &RawNode) -> Result<ConfigDocument, ConfigError> {
    if !matches!(raw, RawNode::Map(_)) {
        return Err(ConfigError::RootNotMap);
    }
    match convert(raw, "", 0, MAX_CONFIG_DEPTH)? {
        Value::Object(map) => Ok(ConfigDocument(map)),
        _ => Err(ConfigError::RootNotMap),
    }
}

/// Applies the configuration node rules to an arbitrary stored document.
pub fn check_document(doc: &Value, depth_limit: usize) -> Result<(), ConfigError> {
    fn walk(v: &Value, path: &str, depth: usize, limit: usize) -> Result<(), ConfigError> {
        match v {
            Value::Number(n) if n.is_u64() && n.as_i64().is_none() => {
                Err(ConfigError::IntegerOutOfRange { path: path.to_string() })
            }
            Value::Array(items) => {
                if depth + 1 > limit {
                    return Err(ConfigError::DepthExceeded { limit });
                }
                for (i, item) in items.iter().enumerate() {
                    walk(item, &join_path(path, &i.to_string()), depth + 1, limit)?;
                }
                Ok(())
            }
            Value::Object(map) => {
                if depth + 1 > limit {
                    return Err(ConfigError::DepthExceeded { limit });
                }
                for (key, child) in map {
                    check_key(path, key)?;
                    walk(child, &join_path(path, key), depth + 1, limit)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
    walk(doc, "", 0, depth_limit)
}

/// A validated configuration tree: a map whose keys are path-addressable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigDocument(Map<String, Value>);

impl ConfigDocument {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_json(value: &Value) -> Result<Self, ConfigError> {
        validate_config(&RawNode::from(value))
    }

    pub fn as_map(&self) -> &Map<String, Value> {
        &self.0
    }

    pub fn to_value(&self) -> Value {
        Value::Object(self.0.clone())
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }

    /// Sorted-key, whitespace-free JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.0).expect("config serializes")
    }
}

impl From<ConfigDocument> for Value {
    fn from(doc: ConfigDocument) -> Self {
        doc.into_value()
    }
}

impl Serialize for ConfigDocument {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ConfigDocument {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        ConfigDocument::from_json(&value).map_err(serde::de::Error::custom)
    }
}

/// Depth-first, key-sorted enumeration of every scalar leaf, addressed by dotted path.
///
/// List elements are addressed by index (`a.0`, `a.1`, ...) in list order. Empty
/// maps and lists contribute no leaves.
pub fn flatten_paths(config: &ConfigDocument) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for (key, child) in &config.0 {
        flatten_into(child, key.clone(), &mut out);
    }
    out
}

/// [`flatten_paths`] for any JSON value, with `prefix` prepended to every path.
pub fn flatten_value(value: &Value, prefix: &str) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    match value {
        Value::Object(map) => {
            for (key, child) in map {
                flatten_into(child, join_path(prefix, key), &mut out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten_into(child, join_path(prefix, &i.to_string()), &mut out);
            }
        }
        scalar => out.push((prefix.to_string(), scalar.clone())),
    }
    out
}

fn flatten_into(value: &Value, path: String, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (key, child) in map {
                flatten_into(child, format!("{path}.{key}"), out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten_into(child, format!("{path}.{i}"), out);
            }
        }
        scalar => out.push((path, scalar.clone())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
    Interrupted,
}

impl RunStatus {
    pub const ALL: [RunStatus; 4] =
        [RunStatus::Running, RunStatus::Completed, RunStatus::Failed, RunStatus::Interrupted];

    pub fn is_terminal(self) -> bool {
        self != RunStatus::Running
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Running => "RUNNING",
            RunStatus::Completed => "COMPLETED",
            RunStatus::Failed => "FAILED",
            RunStatus::Interrupted => "INTERRUPTED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunEvent {
    Complete,
    Fail,
    Interrupt,
}

impl RunEvent {
    pub const ALL: [RunEvent; 3] = [RunEvent::Complete, RunEvent::Fail, RunEvent::Interrupt];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition: {event:?} on {from}")]
pub struct IllegalTransition {
    pub from: RunStatus,
    pub event: RunEvent,
}

/// The run-status state machine. Terminal states accept no event.
pub fn transition(current: RunStatus, event: RunEvent) -> Result<RunStatus, IllegalTransition> {
    match (current, event) {
        (RunStatus::Running, RunEvent::Complete) => Ok(RunStatus::Completed),
        (RunStatus::Running, RunEvent::Fail) => Ok(RunStatus::Failed),
        (RunStatus::Running, RunEvent::Interrupt) => Ok(RunStatus::Interrupted),
        (from, event) => Err(IllegalTransition { from, event }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostInfo {
    pub hostname: String,
    pub os_name: String,
    pub os_version: String,
    pub runtime_version: String,
    pub captured_at: Timestamp,
}

/// Allowed clock skew between host capture and run start.
pub const HOST_CAPTURE_SKEW_SECS: i64 = 5;

impl HostInfo {
    pub fn check(&self, run_start: &Timestamp) -> Result<(), String> {
        for (name, field) in [
            ("hostname", &self.hostname),
            ("os_name", &self.os_name),
            ("os_version", &self.os_version),
            ("runtime_version", &self.runtime_version),
        ] {
            if field.is_empty() {
                return Err(format!("host.{name} is empty"));
            }
        }
        if self.captured_at > run_start.plus_secs(HOST_CAPTURE_SKEW_SECS) {
            return Err("host.captured_at is later than the run start".into());
        }
        Ok(())
    }
}

const UNKNOWN: &str = "unknown";

fn non_empty(s: Option<String>) -> String {
    s.filter(|s| !s.is_empty()).unwrap_or_else(|| UNKNOWN.to_string())
}

#[cfg(unix)]
fn os_hostname() -> Option<String> {
    let mut buf = [0u8; 256];
    // SAFETY: buf is writable for its full length; the result is NUL-terminated or truncated.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc != 0 {
        return None;
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    Some(String::from_utf8_lossy(&buf[..end]).into_owned())
}

#[cfg(unix)]
fn os_uname() -> Option<(String, String)> {
    use std::ffi::CStr;
    // SAFETY: utsname is plain data; uname fills it with NUL-terminated strings.
    let mut info: libc::utsname = unsafe { std::mem::zeroed() };
    if unsafe { libc::uname(&mut info) } != 0 {
        return None;
    }
    let field = |f: &[libc::c_char]| {
        // SAFETY: uname guarantees NUL termination within the field.
        unsafe { CStr::from_ptr(f.as_ptr()) }.to_string_lossy().into_owned()
    };
    Some((field(&info.sysname), field(&info.release)))
}

#[cfg(not(unix))]
fn os_hostname() -> Option<String> {
    std::env::var("COMPUTERNAME").ok()
}

#[cfg(not(unix))]
fn os_uname() -> Option<(String, String)> {
    Some((std::env::consts::OS.to_string(), UNKNOWN.to_string()))
}

/// Describes the local machine. Never touches the network.
pub fn capture_host() -> HostInfo {
    let (os_name, os_version) = match os_uname() {
        Some((name, release)) => (Some(name), Some(release)),
        None => (None, None),
    };
    HostInfo {
        hostname: non_empty(os_hostname()),
        os_name: non_empty(os_name),
        os_version: non_empty(os_version),
        runtime_version: format!("altar/{}", env!("CARGO_PKG_VERSION")),
        captured_at: Timestamp::now(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ArtifactKind {
    Inline,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    pub kind: ArtifactKind,
    pub size_bytes: u64,
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob_uid: Option<String>,
    pub media_type: String,
}

impl ArtifactRef {
    pub fn check(&self, large_file_threshold: u64) -> Result<(), String> {
        if !is_sha256_hex(&self.content_hash) {
            return Err("content_hash is not a SHA-256 hex digest".into());
        }
        match (self.kind, &self.blob_uid) {
            (ArtifactKind::Blob, None) => Err("BLOB artifact without blob_uid".into()),
            (ArtifactKind::Inline, Some(_)) => Err("INLINE artifact with blob_uid".into()),
            (ArtifactKind::Inline, None) if self.size_bytes > large_file_threshold => {
                Err("INLINE artifact above the large-file threshold".into())
            }
            _ => Ok(()),
        }
    }
}

/// A captured source file: path relative to the experiment root and its SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: i64,
    #[serde(rename = "experiment", with = "experiment_field")]
    pub experiment_name: String,
    pub config: ConfigDocument,
    pub host: HostInfo,
    pub status: RunStatus,
    pub start_time: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_time: Option<Timestamp>,
    pub heartbeat: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default)]
    pub captured_out: String,
    #[serde(default)]
    pub artifacts: Vec<ArtifactRef>,
    #[serde(default)]
    pub metric_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest_fingerprint: Option<String>,
}

/// Stores the experiment name as `{"experiment": {"name": ...}}` so that
/// `experiment.name` is a query path.
mod experiment_field {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Experiment {
        name: String,
    }

    pub fn serialize<S: Serializer>(name: &str, serializer: S) -> Result<S::Ok, S::Error> {
        Experiment { name: name.to_string() }.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<String, D::Error> {
        Experiment::deserialize(deserializer).map(|e| e.name)
    }
}

impl RunRecord {
    pub fn to_document(&self) -> Value {
        serde_json::to_value(self).expect("run record serializes")
    }

    pub fn from_document(doc: &Value) -> serde_json::Result<Self> {
        RunRecord::deserialize(doc)
    }

    pub fn artifact(&self, name: &str) -> Option<&ArtifactRef> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Derived display state: a running run whose heartbeat is older than `stale_after_secs`.
    pub fn is_stale(&self, now: &Timestamp, stale_after_secs: u64) -> bool {
        self.status == RunStatus::Running
            && now.secs_since(&self.heartbeat) > i64::try_from(stale_after_secs).unwrap_or(i64::MAX)
    }

    /// Structural invariants that hold for every persisted record.
    pub fn check(&self) -> Result<(), String> {
        if self.run_id <= 0 {
            return Err("run_id must be positive".into());
        }
        if self.status.is_terminal() != self.stop_time.is_some() {
            return Err("stop_time must be present exactly when the run is terminal".into());
        }
        if self.stop_time.is_some_and(|stop| stop < self.start_time) {
            return Err("stop_time precedes start_time".into());
        }
        if self.heartbeat < self.start_time {
            return Err("heartbeat precedes start_time".into());
        }
        if let Some(result) = &self.result {
            if result.is_array() || result.is_object() {
                return Err("result must be a scalar".into());
            }
        }
        let mut names = std::collections::HashSet::new();
        if !self.artifacts.iter().all(|a| names.insert(a.name.as_str())) {
            return Err("artifact names must be unique".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub run_id: i64,
    pub name: String,
    pub steps: Vec<f64>,
    pub values: Vec<f64>,
    pub timestamps: Vec<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("step {step} does not follow {previous} in series {name:?}")]
    NonMonotonicStep { name: String, previous: f64, step: f64 },
    #[error("non-finite value in series {name:?}")]
    NonFinite { name: String },
}

impl MetricSeries {
    pub fn new(run_id: i64, name: impl Into<String>) -> Self {
        Self { run_id, name: name.into(), steps: vec![], values: vec![], timestamps: vec![] }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_step(&self) -> Option<f64> {
        self.steps.last().copied()
    }

    /// Appends one point; steps must strictly increase.
    pub fn push(&mut self, step: f64, value: f64, at: Timestamp) -> Result<(), MetricError> {
        if !step.is_finite() || !value.is_finite() {
            return Err(MetricError::NonFinite { name: self.name.clone() });
        }
        if let Some(previous) = self.last_step() {
            if step <= previous {
                return Err(MetricError::NonMonotonicStep {
                    name: self.name.clone(),
                    previous,
                    step,
                });
            }
        }
        self.steps.push(step);
        self.values.push(value);
        self.timestamps.push(at);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: i64,
    pub run_id: i64,
    pub author: String,
    pub created_at: Timestamp,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub note: String,
}

/// Counts runs per experiment name, sorted by name.
pub fn count_by_experiment<'a>(names: impl IntoIterator<Item = &'a str>) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for name in names {
        *counts.entry(name).or_default() += 1;
    }
    counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
