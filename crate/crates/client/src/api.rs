use std::fs::File;
use std::io::{self, Write};
use std::path::Path;
use std::time::Duration;

use reqwest::blocking::{multipart, Client, RequestBuilder, Response};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};
use thiserror::Error;
use url::Url;

use altar_core::integrity::IntegrityReport;
use altar_core::model::{ArtifactRef, MetricSeries, RunEvent};

/// Largest page the service hands out.
pub const PAGE_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid server URL {0:?}")]
    BadUrl(String),
    #[error("server unreachable at {url}: {source}")]
    Unreachable {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("server returned {status} {code}: {message}")]
    Api { status: StatusCode, code: String, message: String },
    #[error("unexpected response from server: {0}")]
    Protocol(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

/// One page of `GET /api/runs`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPage {
    pub total: usize,
    pub runs: Vec<Value>,
}

/// Blocking client for the JSON API.
#[derive(Debug, Clone)]
pub struct ApiClient {
    base: Url,
    token: Option<String>,
    http: Client,
}

impl ApiClient {
    pub fn new(server: &str, token: Option<String>) -> Result<Self> {
        let mut base = Url::parse(server).map_err(|_| ClientError::BadUrl(server.to_string()))?;
        if base.cannot_be_a_base() || !matches!(base.scheme(), "http" | "https") {
            return Err(ClientError::BadUrl(server.to_string()));
        }
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        let http = Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .timeout(None)
            .build()
            .map_err(|e| ClientError::Unreachable { url: server.to_string(), source: e })?;
        Ok(Self { base, token: token.filter(|t| !t.is_empty()), http })
    }

    pub fn base_url(&self) -> &Url {
        &self.base
    }

    /// `<base>/api/<segments...>` with every segment percent-encoded.
    pub fn url(&self, segments: &[&str]) -> Url {
        let mut url = self.base.clone();
        {
            let mut path = url.path_segments_mut().expect("base URL checked in new");
            path.pop_if_empty().push("api");
            path.extend(segments);
        }
        url
    }

    /// A request with authentication applied; send it with [`ApiClient::send`].
    pub fn request(&self, method: Method, url: Url) -> RequestBuilder {
        let builder = self.http.request(method, url);
        match &self.token {
            Some(token) => builder.bearer_auth(token),
            None => builder,
        }
    }

    /// Sends `request` and maps non-2xx responses to [`ClientError::Api`].
    pub fn send(&self, request: RequestBuilder) -> Result<Response> {
        let response = request.send().map_err(|e| ClientError::Unreachable {
            url: e.url().map_or_else(|| self.base.to_string(), Url::to_string),
            source: e,
        })?;
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let text = response.text().unwrap_or_default();
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        Err(ClientError::Api {
            status,
            code: body.get("error").and_then(Value::as_str).unwrap_or("Unknown").to_string(),
            message: body.get("message").and_then(Value::as_str).unwrap_or(&text).to_string(),
        })
    }

    fn json(&self, request: RequestBuilder) -> Result<Value> {
        let response = self.send(request)?;
        let text = response.text().map_err(|e| ClientError::Protocol(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ClientError::Protocol(format!("invalid JSON: {e}")))
    }

    fn decode<T: serde::de::DeserializeOwned>(value: Value) -> Result<T> {
        serde_json::from_value(value).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn create_run(&self, body: &Value) -> Result<i64> {
        let reply = self.json(self.request(Method::POST, self.url(&["runs"])).json(body))?;
        reply
            .get("run_id")
            .and_then(Value::as_i64)
            .ok_or_else(|| ClientError::Protocol(format!("create_run reply without run_id: {reply}")))
    }

    pub fn log_metrics(&self, run_id: i64, points: &[Value]) -> Result<usize> {
        let url = self.url(&["runs", &run_id.to_string(), "metrics"]);
        let reply = self.json(self.request(Method::POST, url).json(points))?;
        reply
            .get("accepted")
            .and_then(Value::as_u64)
            .map(|n| n as usize)
            .ok_or_else(|| ClientError::Protocol(format!("log_metrics reply without accepted: {reply}")))
    }

    fn upload(&self, run_id: i64, name: &str, media_type: &str, file: multipart::Part) -> Result<ArtifactRef> {
        let form = multipart::Form::new()
            .text("name", name.to_string())
            .text("media_type", media_type.to_string())
            .part("file", file.file_name(name.rsplit('/').next().unwrap_or(name).to_string()));
        let url = self.url(&["runs", &run_id.to_string(), "artifacts"]);
        Self::decode(self.json(self.request(Method::POST, url).multipart(form))?)
    }

    /// Streams a file from disk as an artifact.
    pub fn add_artifact_file(&self, run_id: i64, name: &str, media_type: &str, path: &Path) -> Result<ArtifactRef> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        self.upload(run_id, name, media_type, multipart::Part::reader_with_length(file, len))
    }

    pub fn add_artifact_bytes(&self, run_id: i64, name: &str, media_type: &str, bytes: Vec<u8>) -> Result<ArtifactRef> {
        self.upload(run_id, name, media_type, multipart::Part::bytes(bytes))
    }

    pub fn finish_run(
        &self,
        run_id: i64,
        event: RunEvent,
        result: Option<Value>,
        captured_out: Option<&str>,
    ) -> Result<Value> {
        let mut body = json!({"event": event});
        if let Some(result) = result {
            body["result"] = result;
        }
        if let Some(out) = captured_out {
            body["captured_out"] = json!(out);
        }
        let url = self.url(&["runs", &run_id.to_string(), "finish"]);
        self.json(self.request(Method::POST, url).json(&body))
    }

    pub fn heartbeat(&self, run_id: i64) -> Result<Value> {
        let url = self.url(&["runs", &run_id.to_string(), "heartbeat"]);
        self.json(self.request(Method::POST, url))
    }

    pub fn query_runs(&self, filter: &Value, sort: &str, skip: usize, limit: usize) -> Result<RunPage> {
        let mut query: Vec<(&str, String)> = vec![("skip", skip.to_string()), ("limit", limit.to_string())];
        if filter.as_object().is_some_and(|m| !m.is_empty()) {
            query.push(("filter", filter.to_string()));
        }
        if !sort.is_empty() {
            query.push(("sort", sort.to_string()));
        }
        let reply = self.json(self.request(Method::GET, self.url(&["runs"])).query(&query))?;
        let total = reply.get("total").and_then(Value::as_u64);
        let runs = reply.get("runs").and_then(Value::as_array);
        match (total, runs) {
            (Some(total), Some(runs)) => Ok(RunPage { total: total as usize, runs: runs.clone() }),
            _ => Err(ClientError::Protocol(format!("query reply without total/runs: {reply}"))),
        }
    }

    /// Every matching run, fetched page by page.
    pub fn query_all(&self, filter: &Value, sort: &str) -> Result<Vec<Value>> {
        let mut runs = Vec::new();
        loop {
            let page = self.query_runs(filter, sort, runs.len(), PAGE_SIZE)?;
            let got = page.runs.len();
            runs.extend(page.runs);
            if got == 0 || runs.len() >= page.total {
                return Ok(runs);
            }
        }
    }

    pub fn get_run(&self, run_id: i64) -> Result<Value> {
        self.json(self.request(Method::GET, self.url(&["runs", &run_id.to_string()])))
    }

    pub fn get_metric(&self, run_id: i64, name: &str) -> Result<MetricSeries> {
        let url = self.url(&["runs", &run_id.to_string(), "metrics", name]);
        Self::decode(self.json(self.request(Method::GET, url))?)
    }

    fn download(&self, url: Url, out: &mut dyn Write) -> Result<u64> {
        let mut response = self.send(self.request(Method::GET, url))?;
        response.copy_to(out).map_err(|e| ClientError::Protocol(format!("download interrupted: {e}")))
    }

    /// Writes an artifact's bytes to `out`; `name` may contain `/`.
    pub fn download_artifact(&self, run_id: i64, name: &str, out: &mut dyn Write) -> Result<u64> {
        let id = run_id.to_string();
        let mut segments = vec!["runs", id.as_str(), "artifacts"];
        segments.extend(name.split('/'));
        self.download(self.url(&segments), out)
    }

    pub fn download_blob(&self, uid: &str, out: &mut dyn Write) -> Result<u64> {
        self.download(self.url(&["blobs", uid]), out)
    }

    pub fn experiments(&self) -> Result<Value> {
        self.json(self.request(Method::GET, self.url(&["experiments"])))
    }

    pub fn annotate(&self, run_id: i64, author: &str, tags: &[&str], note: &str) -> Result<Value> {
        let url = self.url(&["runs", &run_id.to_string(), "annotations"]);
        self.json(self.request(Method::POST, url).json(&json!({"author": author, "tags": tags, "note": note})))
    }

    pub fn annotations(&self, run_id: i64) -> Result<Vec<Value>> {
        let url = self.url(&["runs", &run_id.to_string(), "annotations"]);
        Self::decode(self.json(self.request(Method::GET, url))?)
    }

    pub fn integrity(&self) -> Result<IntegrityReport> {
        Self::decode(self.json(self.request(Method::GET, self.url(&["integrity"])))?)
    }
}
