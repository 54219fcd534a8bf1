//! Folder ingestion: turns a saved experiment folder into one run.
//!
//! * `config.json` at the folder root becomes the run configuration.
//! * `metrics/<name>.csv` files (header `step,value[,timestamp]`) become metric series.
//! * Every regular file, including the two kinds above, is uploaded as an
//!   artifact named by its path relative to the folder. The service decides
//!   inline or blob storage by size.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use altar_core::hash::{sha256_file, sha256_hex};
use altar_core::model::{capture_host, validate_config, ConfigDocument, ConfigError, RawNode, RunEvent};
use altar_core::Timestamp;

use crate::api::{ApiClient, ClientError};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_DIR: &str = "metrics";
/// Points per metrics request.
pub const METRIC_CHUNK: usize = 5000;

#[derive(Debug, Error)]
pub enum SenderError {
    #[error("{path}: {reason}")]
    ConfigParse { path: PathBuf, reason: String },
    #[error("{0} contains no files")]
    EmptyFolder(PathBuf),
    #[error("experiment name must not be empty")]
    EmptyName,
    #[error("{file}:{line}: {reason}")]
    MetricCsvMalformed { file: String, line: u64, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("server unreachable: {0}")]
    ServerUnreachable(#[source] ClientError),
    #[error("upload failed: {0}")]
    UploadFailed(#[source] ClientError),
}

impl From<ClientError> for SenderError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Unreachable { .. } | ClientError::BadUrl(_) => SenderError::ServerUnreachable(e),
            _ => SenderError::UploadFailed(e),
        }
    }
}

impl SenderError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        SenderError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    /// Relative to the folder, `/`-separated.
    pub path: String,
    pub size_bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataFile {
    pub path: String,
    pub size_bytes: u64,
}

/// Everything needed to ingest a folder, computed without touching the network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestPlan {
    pub folder: PathBuf,
    pub experiment_name: String,
    pub config: ConfigDocument,
    pub metric_files: Vec<String>,
    pub data_files: Vec<DataFile>,
    pub files: Vec<FileEntry>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestOutcome {
    Created { run_id: i64 },
    Skipped { existing_run_id: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricPoint {
    pub step: f64,
    pub value: f64,
    pub timestamp: Option<Timestamp>,
}

/// SHA-256 over `path NUL sha256 LF` for each entry in path order.
pub fn fingerprint(files: &[FileEntry]) -> String {
    let mut entries: Vec<&FileEntry> = files.iter().collect();
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.path);
        text.push('\0');
        text.push_str(&e.sha256);
        text.push('\n');
    }
    sha256_hex(text.as_bytes())
}

fn metric_name(rel: &str) -> Option<&str> {
    let rest = rel.strip_prefix(METRICS_DIR)?.strip_prefix('/')?;
    let stem = rest.strip_suffix(".csv")?;
    (!stem.is_empty() && !stem.contains('/')).then_some(stem)
}

fn parse_config(path: &Path) -> Result<ConfigDocument, SenderError> {
    let bytes = fs::read(path).map_err(|e| SenderError::io(path, e))?;
    let value: Value = serde_json::from_slice(&bytes)
        .map_err(|e| SenderError::ConfigParse { path: path.to_path_buf(), reason: e.to_string() })?;
    validate_config(&RawNode::from(&value)).map_err(|e: ConfigError| SenderError::ConfigParse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Lists and hashes every regular file under `folder`.
pub fn scan_folder(folder: &Path, experiment_name: &str) -> Result<IngestPlan, SenderError> {
    if experiment_name.trim().is_empty() {
        return Err(SenderError::EmptyName);
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(folder).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(folder).to_path_buf();
            SenderError::io(&path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(folder).expect("walkdir yields paths under its root");
        let parts: Option<Vec<&str>> = rel.components().map(|c| c.as_os_str().to_str()).collect();
        let rel = parts
            .ok_or_else(|| SenderError::io(entry.path(), std::io::Error::other("file name is not valid UTF-8")))?
            .join("/");
        let (sha256, size_bytes) = sha256_file(entry.path()).map_err(|e| SenderError::io(entry.path(), e))?;
        files.push(FileEntry { path: rel, size_bytes, sha256 });
    }
    if files.is_empty() {
        return Err(SenderError::EmptyFolder(folder.to_path_buf()));
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));

    let config = if files.iter().any(|f| f.path == CONFIG_FILE) {
        parse_config(&folder.join(CONFIG_FILE))?
    } else {
        ConfigDocument::empty()
    };
    let metric_files: Vec<String> = files.iter().filter(|f| metric_name(&f.path).is_some()).map(|f| f.path.clone()).collect();
    let data_files = files
        .iter()
        .filter(|f| f.path != CONFIG_FILE && metric_name(&f.path).is_none())
        .map(|f| DataFile { path: f.path.clone(), size_bytes: f.size_bytes })
        .collect();
    Ok(IngestPlan {
        folder: folder.to_path_buf(),
        experiment_name: experiment_name.to_string(),
        config,
        metric_files,
        data_files,
        fingerprint: fingerprint(&files),
        files,
    })
}

/// Reads a `step,value[,timestamp]` CSV. Steps must strictly increase.
pub fn parse_metric_csv(path: &Path, display: &str) -> Result<Vec<MetricPoint>, SenderError> {
    let malformed = |line: u64, reason: String| SenderError::MetricCsvMalformed { file: display.to_string(), line, reason };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| malformed(1, e.to_string()))?;
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let columns: Vec<&str> = headers.iter().collect();
    let has_timestamp = match columns.as_slice() {
        ["step", "value"] => false,
        ["step", "value", "timestamp"] => true,
        _ => return Err(malformed(1, format!("header must be step,value[,timestamp], found {}", columns.join(",")))),
    };

    let mut points: Vec<MetricPoint> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |i: usize, what: &str| -> Result<f64, SenderError> {
            let raw = record.get(i).unwrap_or_default();
            match raw.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(malformed(line, format!("{what} {raw:?} is not a finite number"))),
            }
        };
        let step = number(0, "step")?;
        let value = number(1, "value")?;
        let timestamp = match record.get(2) {
            Some(raw) if has_timestamp && !raw.is_empty() => {
                Some(raw.parse::<Timestamp>().map_err(|e| malformed(line, format!("timestamp {raw:?}: {e}")))?)
            }
            _ => None,
        };
        if let Some(prev) = points.last() {
            if step <= prev.step {
                return Err(malformed(line, format!("step {step} does not increase past {}", prev.step)));
            }
        }
        points.push(MetricPoint { step, value, timestamp });
    }
    Ok(points)
}

fn media_type(path: &str) -> &'static str {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
    match ext.as_str() {
        "json" => "application/json",
        "csv" => "text/csv",
        "txt" | "log" => "text/plain",
        "py" => "text/x-python",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "tif" | "tiff" => "image/tiff",
        "mp4" => "video/mp4",
        "avi" => "video/x-msvideo",
        "h5" | "hdf5" => "application/x-hdf5",
        _ => "application/octet-stream",
    }
}

fn upload_contents(plan: &IngestPlan, client: &ApiClient, run_id: i64, metrics: &[(String, Vec<MetricPoint>)]) -> Result<(), SenderError> {
    for (name, points) in metrics {
        for chunk in points.chunks(METRIC_CHUNK) {
            let batch: Vec<Value> = chunk
                .iter()
                .map(|p| {
                    let mut v = json!({"name": name, "step": p.step, "value": p.value});
                    if let Some(ts) = p.timestamp {
                        v["timestamp"] = json!(ts);
                    }
                    v
                })
                .collect();
            client.log_metrics(run_id, &batch)?;
        }
    }
    for file in &plan.files {
        client.add_artifact_file(run_id, &file.path, media_type(&file.path), &plan.folder.join(&file.path))?;
    }
    Ok(())
}

/// Ingests a planned folder unless a completed run with the same fingerprint exists.
///
/// On failure after the run was created, the run is finished as failed with the
/// error in `captured_out`, so no run is left running.
pub fn ingest(plan: &IngestPlan, client: &ApiClient) -> Result<IngestOutcome, SenderError> {
    let mut metrics = Vec::with_capacity(plan.metric_files.len());
    for rel in &plan.metric_files {
        let name = metric_name(rel).expect("metric files are named metrics/<name>.csv");
        metrics.push((name.to_string(), parse_metric_csv(&plan.folder.join(rel), rel)?));
    }

    let existing = client.query_runs(
        &json!({"ingest_fingerprint": plan.fingerprint, "status": "COMPLETED"}),
        "run_id",
        0,
        1,
    )?;
    if let Some(run_id) = existing.runs.first().and_then(|r| r.get("run_id")).and_then(Value::as_i64) {
        return Ok(IngestOutcome::Skipped { existing_run_id: run_id });
    }

    let run_id = client.create_run(&json!({
        "experiment_name": plan.experiment_name,
        "config": plan.config,
        "host": capture_host(),
        "ingest_fingerprint": plan.fingerprint,
    }))?;
    match upload_contents(plan, client, run_id, &metrics) {
        Ok(()) => {
            let summary = format!("ingested {} files from {}\n", plan.files.len(), plan.folder.display());
            client.finish_run(run_id, RunEvent::Complete, None, Some(&summary))?;
            Ok(IngestOutcome::Created { run_id })
        }
        Err(e) => {
            let note = format!("ingest failed: {e}\n");
            // best effort: the original error is what the caller needs to see
            let _ = client.finish_run(run_id, RunEvent::Fail, None, Some(&note));
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, rel: &str, content: &str) {
        let path = dir.join(rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, content).unwrap();
    }

    #[test]
    fn plans_a_movie_folder() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "config.json", r#"{"exp_duration": 100, "frame_acquisition": {"frame_rate": 10}}"#);
        write(dir.path(), "metrics/Average_fluorescence.csv", "step,value\n0,1.5\n0.1,1.6\n");
        write(dir.path(), "video.bin", "frames");
        let plan = scan_folder(dir.path(), "get_movie").unwrap();
        assert_eq!(plan.metric_files, vec!["metrics/Average_fluorescence.csv"]);
        assert_eq!(plan.data_files, vec![DataFile { path: "video.bin".into(), size_bytes: 6 }]);
        assert_eq!(plan.config.as_map()["exp_duration"], json!(100));
        assert_eq!(plan.files.len(), 3);
    }

    #[test]
    fn missing_config_means_empty_config() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "data/a.txt", "x");
        let plan = scan_folder(dir.path(), "e").unwrap();
        assert!(plan.config.as_map().is_empty());
        assert_eq!(plan.data_files[0].path, "data/a.txt");
    }

    #[test]
    fn empty_folder_and_bad_config_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_folder(dir.path(), "e"), Err(SenderError::EmptyFolder(_))));
        write(dir.path(), "config.json", "{not json");
        assert!(matches!(scan_folder(dir.path(), "e"), Err(SenderError::ConfigParse { .. })));
        write(dir.path(), "config.json", r#"{"a.b": 1}"#);
        assert!(matches!(scan_folder(dir.path(), "e"), Err(SenderError::ConfigParse { .. })));
        write(dir.path(), "config.json", "[1]");
        assert!(matches!(scan_folder(dir.path(), "e"), Err(SenderError::ConfigParse { .. })));
    }

    #[test]
    fn copies_share_a_fingerprint() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [a.path(), b.path()] {
            write(dir, "z.txt", "last");
            write(dir, "a/b.txt", "nested");
            write(dir, "config.json", "{}");
        }
        let pa = scan_folder(a.path(), "e").unwrap();
        let pb = scan_folder(b.path(), "e").unwrap();
        assert_eq!(pa.fingerprint, pb.fingerprint);
        write(b.path(), "z.txt", "changed");
        assert_ne!(pa.fingerprint, scan_folder(b.path(), "e").unwrap().fingerprint);
    }

    #[test]
    fn fingerprint_ignores_input_order() {
        let e = |p: &str, h: &str| FileEntry { path: p.into(), size_bytes: 0, sha256: h.into() };
        let one = fingerprint(&[e("a", "1"), e("b", "2")]);
        assert_eq!(one, fingerprint(&[e("b", "2"), e("a", "1")]));
        // independent computation of the documented encoding
        assert_eq!(one, sha256_hex(b"a\x001\nb\x002\n"));
    }

    #[test]
    fn metric_csv_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "step,value,timestamp\n0,1,2025-01-01T00:00:00Z\n0.1,2,\n").unwrap();
        let points = parse_metric_csv(&path, "m.csv").unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[1].step, 0.1);
        assert!(points[0].timestamp.is_some() && points[1].timestamp.is_none());

        for (content, line) in [
            ("value,step\n1,2\n", 1),
            ("0,1\n1,2\n", 1),
            ("step,value\n1,1\n0.5,2\n", 3),
            ("step,value\n1,1\n1,2\n", 3),
            ("step,value\n1,abc\n", 2),
            ("step,value\nNaN,1\n", 2),
        ] {
            fs::write(&path, content).unwrap();
            match parse_metric_csv(&path, "m.csv") {
                Err(SenderError::MetricCsvMalformed { line: l, .. }) => assert_eq!(l, line, "{content:?}"),
                other => panic!("{content:?}: {other:?}"),
            }
        }
    }
}
