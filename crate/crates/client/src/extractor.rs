//! Query and export: textual filters, tabular exports and checksummed bundles.
//!
//! A bundle directory looks like
//!
//! ```text
//! runs.jsonl
//! annotations.jsonl
//! metrics/<run_id>/<name>.csv
//! artifacts/<run_id>/<artifact name>
//! manifest.json
//! ```
//!
//! `manifest.json` lists every other file with its size and SHA-256, and carries
//! a hash of its own canonical form so that edits to it are caught too.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use altar_core::filter_lang::{compile_filter, evaluate, parse_filter, Compiled, FilterExpr, SyntaxError};
use altar_core::hash::{sha256_file, sha256_hex, HashingWriter};
use altar_core::model::flatten_value;
use altar_core::{canonical_json, Timestamp};

use crate::api::{ApiClient, ClientError};

pub const TOOL_NAME: &str = "altar-extract";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Fixed CSV columns; config columns are `config.<path>`.
pub const CSV_BASE_COLUMNS: [&str; 5] = ["experiment_name", "result", "run_id", "start_time", "status"];

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("server unreachable: {0}")]
    ServerUnreachable(#[source] ClientError),
    #[error("{0}")]
    Client(#[source] ClientError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no space left while writing {0}")]
    StorageFull(PathBuf),
    #[error("output directory {0} is not empty")]
    OutputNotEmpty(PathBuf),
    #[error("checksum mismatch: {path}")]
    ChecksumMismatch { path: String },
    #[error("missing file: {path}")]
    MissingFile { path: String },
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
}

impl ExtractError {
    fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::StorageFull {
            ExtractError::StorageFull(path.to_path_buf())
        } else {
            ExtractError::Io { path: path.to_path_buf(), source }
        }
    }

    /// True for errors that mean a bundle does not match its manifest.
    pub fn is_verification_failure(&self) -> bool {
        matches!(
            self,
            ExtractError::ChecksumMismatch { .. } | ExtractError::MissingFile { .. } | ExtractError::ManifestInvalid(_)
        )
    }

    /// 2 for syntax errors, 3 for verification failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExtractError::Syntax(_) => 2,
            e if e.is_verification_failure() => 3,
            _ => 1,
        }
    }
}

impl From<ClientError> for ExtractError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Unreachable { .. } | ClientError::BadUrl(_) => ExtractError::ServerUnreachable(e),
            _ => ExtractError::Client(e),
        }
    }
}

pub type Result<T, E = ExtractError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Jsonl,
    Csv,
}

/// Parses filter text; blank text selects every run.
pub fn parse_optional_filter(text: &str) -> Result<Option<FilterExpr>, SyntaxError> {
    if text.trim().is_empty() {
        Ok(None)
    } else {
        parse_filter(text).map(Some)
    }
}

/// Runs matching `filter`, ordered by run id.
///
/// Conjunctions are evaluated by the server; anything with `or`/`not` is
/// evaluated here over a full fetch.
pub fn fetch_runs(client: &ApiClient, filter: Option<&FilterExpr>) -> Result<Vec<Value>> {
    let runs = match filter.map(compile_filter) {
        None => client.query_all(&json!({}), "run_id")?,
        Some(Compiled::Server(f)) => client.query_all(&f.to_value(), "run_id")?,
        Some(Compiled::Residual(expr)) => {
            let mut all = client.query_all(&json!({}), "run_id")?;
            all.retain(|run| evaluate(&expr, run));
            all
        }
    };
    Ok(runs)
}

fn cell(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn csv_row(run: &Value) -> BTreeMap<String, String> {
    let mut row = BTreeMap::new();
    let mut put = |column: &str, value: Option<&Value>| {
        if let Some(v) = value {
            row.insert(column.to_string(), cell(v));
        }
    };
    put("run_id", run.get("run_id"));
    put("experiment_name", run.get("experiment").and_then(|e| e.get("name")));
    put("status", run.get("status"));
    put("start_time", run.get("start_time"));
    put("result", run.get("result").filter(|r| !r.is_null()));
    if let Some(config) = run.get("config") {
        for (path, value) in flatten_value(config, "config") {
            row.insert(path, cell(&value));
        }
    }
    row
}

/// Writes runs as JSON lines or as a CSV table; returns the number of runs.
pub fn write_runs(runs: &[Value], format: ExportFormat, out: &mut dyn Write) -> io::Result<usize> {
    match format {
        ExportFormat::Jsonl => {
            for run in runs {
                writeln!(out, "{}", canonical_json(run)?)?;
            }
        }
        ExportFormat::Csv => {
            let rows: Vec<BTreeMap<String, String>> = runs.iter().map(csv_row).collect();
            let mut columns: BTreeSet<String> = CSV_BASE_COLUMNS.iter().map(|c| c.to_string()).collect();
            for row in &rows {
                columns.extend(row.keys().cloned());
            }
            let mut writer = csv::Writer::from_writer(out);
            writer.write_record(&columns)?;
            for row in &rows {
                writer.write_record(columns.iter().map(|c| row.get(c).map_or("", String::as_str)))?;
            }
            writer.flush()?;
        }
    }
    Ok(runs.len())
}

/// Fetches matching runs and writes them to `out`.
pub fn export_runs(client: &ApiClient, filter: Option<&FilterExpr>, format: ExportFormat, out: &mut dyn Write) -> Result<usize> {
    let runs = fetch_runs(client, filter)?;
    write_runs(&runs, format, out).map_err(|e| ExtractError::io(Path::new("<output>"), e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub size_bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub exported_at: Timestamp,
    pub filter: String,
    pub run_count: usize,
    pub files: Vec<ManifestEntry>,
    /// SHA-256 of the canonical manifest with this field removed.
    #[serde(default)]
    pub manifest_sha256: String,
}

impl Manifest {
    fn body_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("manifest serializes");
        value.as_object_mut().expect("manifest is an object").remove("manifest_sha256");
        sha256_hex(canonical_json(&value).expect("manifest serializes").as_bytes())
    }

    fn seal(mut self) -> Self {
        self.manifest_sha256 = self.body_hash();
        self
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut text = canonical_json(self).expect("manifest serializes");
        text.push('\n');
        text.into_bytes()
    }

    pub fn entry(&self, path: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleSummary {
    pub manifest_path: PathBuf,
    pub run_count: usize,
    pub file_count: usize,
}

struct BundleWriter {
    root: PathBuf,
    files: Vec<ManifestEntry>,
}

impl BundleWriter {
    fn create(&self, rel: &str) -> Result<(PathBuf, File)> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ExtractError::io(parent, e))?;
        }
        let file = File::create(&path).map_err(|e| ExtractError::io(&path, e))?;
        Ok((path, file))
    }

    /// Writes a file through `fill`, recording its size and hash.
    fn write_with<F>(&mut self, rel: &str, fill: F) -> Result<ManifestEntry>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let (path, file) = self.create(rel)?;
        let mut writer = HashingWriter::new(BufWriter::new(file));
        fill(&mut writer)?;
        let (inner, sha256, size_bytes) = writer.into_parts();
        let file = inner.into_inner().map_err(|e| ExtractError::io(&path, e.into_error()))?;
        file.sync_all().map_err(|e| ExtractError::io(&path, e))?;
        let entry = ManifestEntry { path: rel.to_string(), size_bytes, sha256 };
        self.files.push(entry.clone());
        Ok(entry)
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<ManifestEntry> {
        let path = self.root.join(rel);
        self.write_with(rel, |w| w.write_all(bytes).map_err(|e| ExtractError::io(&path, e)))
    }
}

fn check_output_dir(dir: &Path) -> Result<()> {
    match fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(ExtractError::OutputNotEmpty(dir.to_path_buf()));
            }
            Ok(())
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => fs::create_dir_all(dir).map_err(|e| ExtractError::io(dir, e)),
        Err(e) => Err(ExtractError::io(dir, e)),
    }
}

fn run_id_of(run: &Value) -> Result<i64> {
    run.get("run_id")
        .and_then(Value::as_i64)
        .ok_or_else(|| ExtractError::Client(ClientError::Protocol(format!("run without run_id: {run}"))))
}

fn metric_csv(series: &altar_core::model::MetricSeries) -> io::Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["step", "value", "timestamp"])?;
    for i in 0..series.steps.len() {
        let ts = series.timestamps.get(i).map(ToString::to_string).unwrap_or_default();
        writer.write_record([series.steps[i].to_string(), series.values[i].to_string(), ts])?;
    }
    writer.into_inner().map_err(|e| e.into_error())
}

/// Exports matching runs with their metrics, artifacts and annotations into
/// `out_dir`, then re-verifies the result.
pub fn export_bundle(client: &ApiClient, filter_text: &str, out_dir: &Path) -> Result<BundleSummary> {
    let filter = parse_optional_filter(filter_text)?;
    check_output_dir(out_dir)?;
    let runs = fetch_runs(client, filter.as_ref())?;
    let mut bundle = BundleWriter { root: out_dir.to_path_buf(), files: Vec::new() };

    let mut runs_jsonl = Vec::new();
    write_runs(&runs, ExportFormat::Jsonl, &mut runs_jsonl).map_err(|e| ExtractError::io(out_dir, e))?;
    bundle.write_bytes("runs.jsonl", &runs_jsonl)?;

    let mut annotations_jsonl = Vec::new();
    for run in &runs {
        let run_id = run_id_of(run)?;
        for annotation in client.annotations(run_id)? {
            let line = canonical_json(&annotation).map_err(|e| ExtractError::io(out_dir, e.into()))?;
            annotations_jsonl.extend_from_slice(line.as_bytes());
            annotations_jsonl.push(b'\n');
        }

        let names = run.get("metric_names").and_then(Value::as_array).cloned().unwrap_or_default();
        for name in names.iter().filter_map(Value::as_str) {
            let series = client.get_metric(run_id, name)?;
            let bytes = metric_csv(&series).map_err(|e| ExtractError::io(out_dir, e))?;
            bundle.write_bytes(&format!("metrics/{run_id}/{name}.csv"), &bytes)?;
        }

        let artifacts = run.get("artifacts").and_then(Value::as_array).cloned().unwrap_or_default();
        for artifact in &artifacts {
            let field = |key: &str| artifact.get(key).and_then(Value::as_str).unwrap_or_default().to_string();
            let (name, expected) = (field("name"), field("content_hash"));
            let rel = format!("artifacts/{run_id}/{name}");
            let path = out_dir.join(&rel);
            let blob_uid = artifact.get("blob_uid").and_then(Value::as_str).map(str::to_string);
            let entry = bundle.write_with(&rel, |w| {
                let result = match &blob_uid {
                    Some(uid) => client.download_blob(uid, w),
                    None => client.download_artifact(run_id, &name, w),
                };
                match result {
                    Ok(_) => Ok(()),
                    Err(ClientError::Io(e)) => Err(ExtractError::io(&path, e)),
                    Err(e) => Err(e.into()),
                }
            })?;
            if entry.sha256 != expected {
                return Err(ExtractError::ChecksumMismatch { path: rel });
            }
        }
    }
    bundle.write_bytes("annotations.jsonl", &annotations_jsonl)?;

    let manifest = Manifest {
        tool: TOOL_NAME.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        exported_at: Timestamp::now(),
        filter: filter.map(|f| f.to_string()).unwrap_or_default(),
        run_count: runs.len(),
        files: bundle.files,
        manifest_sha256: String::new(),
    }
    .seal();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.to_bytes()).map_err(|e| ExtractError::io(&manifest_path, e))?;

    verify_bundle(out_dir)?;
    Ok(BundleSummary { manifest_path, run_count: manifest.run_count, file_count: manifest.files.len() })
}

fn manifest_tampered() -> ExtractError {
    ExtractError::ChecksumMismatch { path: MANIFEST_FILE.to_string() }
}

/// Reads `manifest.json`, rejecting any change to its bytes.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ExtractError::MissingFile { path: MANIFEST_FILE.to_string() })
        }
        Err(e) => return Err(ExtractError::io(&path, e)),
    };
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|_| manifest_tampered())?;
    if manifest.to_bytes() != bytes || manifest.body_hash() != manifest.manifest_sha256 {
        return Err(manifest_tampered());
    }
    Ok(manifest)
}

fn safe_relative(rel: &str) -> bool {
    !rel.is_empty()
        && !rel.starts_with('/')
        && !rel.contains('\\')
        && rel.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
}

/// Re-hashes every file listed in the manifest.
pub fn verify_bundle(dir: &Path) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    for entry in &manifest.files {
        if !safe_relative(&entry.path) {
            return Err(ExtractError::ManifestInvalid(format!("unsafe path {:?}", entry.path)));
        }
        let path = dir.join(&entry.path);
        let (sha256, size) = match sha256_file(&path) {
            Ok(found) => found,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(ExtractError::MissingFile { path: entry.path.clone() })
            }
            Err(e) => return Err(ExtractError::io(&path, e)),
        };
        if sha256 != entry.sha256 || size != entry.size_bytes {
            return Err(ExtractError::ChecksumMismatch { path: entry.path.clone() });
        }
    }
    Ok(manifest)
}
