use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::error::ApiError;
use crate::service::{ArtifactContent, RunQuery, Service};

type Shared = Arc<Service>;

const PLACEHOLDER_INDEX: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Altar</title></head>\n\
<body><h1>Altar</h1><p>The viewer is not installed. Start the server with <code>--static-dir</code> \
pointing at a built viewer, or use the JSON API under <code>/api</code>.</p></body></html>\n";

/// The full application: the JSON API under `/api`, static files at `/`.
pub fn router(service: Shared) -> Router {
    let api = Router::new()
        .route("/runs", post(create_run).get(query_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/metrics", post(log_metrics))
        .route("/runs/{id}/metrics/{name}", get(get_metric))
        .route("/runs/{id}/artifacts", post(add_artifact))
        .route("/runs/{id}/artifacts/{*name}", get(download_artifact))
        .route("/runs/{id}/finish", post(finish_run))
        .route("/runs/{id}/heartbeat", post(heartbeat))
        .route("/runs/{id}/annotations", post(annotate).get(list_annotations))
        .route("/blobs/{uid}", get(download_blob))
        .route("/experiments", get(list_experiments))
        .route("/integrity", get(integrity))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(middleware::from_fn_with_state(Arc::clone(&service), require_token))
        .layer(DefaultBodyLimit::disable())
        .with_state(Arc::clone(&service));

    let app = Router::new().nest("/api", api);
    match &service.config().static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app
            .route("/", get(|| async { Html(PLACEHOLDER_INDEX) }))
            .fallback(|| async { (StatusCode::NOT_FOUND, "not found") }),
    }
}

async fn require_token(State(service): State<Shared>, request: Request, next: Next) -> Response {
    if let Some(expected) = &service.config().auth_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_str()) {
            return ApiError::unauthorized().into_response();
        }
    }
    next.run(request).await
}

fn json_response(status: StatusCode, body: &impl Serialize) -> Response {
    match altar_core::canonical_json(body) {
        Ok(text) => (status, [(header::CONTENT_TYPE, "application/json")], text).into_response(),
        Err(e) => ApiError::internal(e.to_string()).into_response(),
    }
}

fn ok(body: &impl Serialize) -> Response {
    json_response(StatusCode::OK, body)
}

fn parse_id(raw: &str) -> Result<i64, ApiError> {
    raw.parse::<i64>()
        .ok()
        .filter(|id| *id > 0)
        .ok_or_else(|| ApiError::bad_request(format!("invalid run id {raw:?}")))
}

fn parse_body(bytes: &Bytes) -> Result<Value, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Value::Object(Default::default()));
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))
}

/// Runs blocking store work off the async executor.
async fn blocking<T, F>(service: &Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ApiError> + Send + 'static,
{
    let service = Arc::clone(service);
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn create_run(State(s): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let body = parse_body(&body)?;
    let run_id = blocking(&s, move |s| s.create_run(&body)).await?;
    Ok(json_response(StatusCode::CREATED, &json!({"run_id": run_id})))
}

async fn query_runs(State(s): State<Shared>, Query(q): Query<RunQuery>) -> Result<Response, ApiError> {
    Ok(ok(&blocking(&s, move |s| s.query_runs(&q)).await?))
}

async fn get_run(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    Ok(ok(&blocking(&s, move |s| s.get_run(id)).await?))
}

async fn log_metrics(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let body = parse_body(&body)?;
    let lock = s.run_lock(id);
    let _guard = lock.lock().await;
    let accepted = blocking(&s, move |s| s.log_metrics(id, &body)).await?;
    Ok(ok(&json!({"accepted": accepted})))
}

async fn get_metric(State(s): State<Shared>, Path((id, name)): Path<(String, String)>) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    Ok(ok(&blocking(&s, move |s| s.get_metric(id, &name)).await?))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    ApiError::bad_request(format!("malformed multipart body: {e}"))
}

async fn add_artifact(State(s): State<Shared>, Path(id): Path<String>, mut form: Multipart) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let lock = s.run_lock(id);
    let _guard = lock.lock().await;
    // 404/409 before any bytes are read
    blocking(&s, move |s| s.check_exists(id)).await?;

    let mut name = None;
    let mut media_type = None;
    let mut staged = None;
    while let Some(mut field) = form.next_field().await.map_err(multipart_error)? {
        match field.name() {
            Some("name") => name = Some(field.text().await.map_err(multipart_error)?),
            Some("media_type") => media_type = Some(field.text().await.map_err(multipart_error)?),
            Some("file") => {
                if name.is_none() {
                    name = field.file_name().map(str::to_string);
                }
                if media_type.is_none() {
                    media_type = field.content_type().map(str::to_string);
                }
                let mut staging = blocking(&s, move |s| s.begin_artifact(id)).await?;
                while let Some(chunk) = field.chunk().await.map_err(multipart_error)? {
                    staging.write_all(&chunk)?;
                }
                staged = Some(staging.finish()?);
            }
            _ => {}
        }
    }
    let staged = staged.ok_or_else(|| ApiError::bad_request("missing multipart field \"file\""))?;
    let name = name.ok_or_else(|| ApiError::bad_request("missing multipart field \"name\""))?;
    let media_type = media_type
        .filter(|m| !m.is_empty())
        .unwrap_or_else(|| "application/octet-stream".to_string());
    let artifact = blocking(&s, move |s| s.attach_artifact(id, &name, &media_type, staged)).await?;
    Ok(json_response(StatusCode::CREATED, &artifact))
}

/// Streams a blocking reader as the response body.
fn stream_body(mut reader: Box<dyn Read + Send>) -> Body {
    let (tx, rx) = tokio::sync::mpsc::channel::<io::Result<Bytes>>(4);
    tokio::task::spawn_blocking(move || loop {
        let mut buf = vec![0u8; 1 << 16];
        match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                buf.truncate(n);
                if tx.blocking_send(Ok(Bytes::from(buf))).is_err() {
                    break;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => {
                let _ = tx.blocking_send(Err(e));
                break;
            }
        }
    });
    Body::from_stream(futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|item| (item, rx)) }))
}

fn bytes_response(body: Body, size: u64, media_type: &str, content_hash: &str) -> Response {
    let mut response = Response::new(body);
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_LENGTH, HeaderValue::from(size));
    headers.insert(
        header::CONTENT_TYPE,
        HeaderValue::from_str(media_type).unwrap_or(HeaderValue::from_static("application/octet-stream")),
    );
    if let Ok(etag) = HeaderValue::from_str(&format!("\"{content_hash}\"")) {
        headers.insert(header::ETAG, etag);
    }
    response
}

async fn download_artifact(
    State(s): State<Shared>,
    Path((id, name)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let (artifact, content) = blocking(&s, move |s| s.artifact_content(id, &name)).await?;
    let body = match content {
        ArtifactContent::Inline(bytes) => Body::from(bytes),
        ArtifactContent::Blob(uid) => {
            let (reader, _) = blocking(&s, move |s| s.open_blob(uid.as_str(), false)).await?;
            stream_body(reader)
        }
    };
    Ok(bytes_response(body, artifact.size_bytes, &artifact.media_type, &artifact.content_hash))
}

async fn download_blob(
    State(s): State<Shared>,
    Path(uid): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let verify = q.get("verify").is_some_and(|v| v == "true" || v == "1");
    let tag = uid.clone();
    let (reader, size) = blocking(&s, move |s| s.open_blob(&uid, verify)).await?;
    Ok(bytes_response(stream_body(reader), size, "application/octet-stream", &tag))
}

async fn finish_run(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let body = parse_body(&body)?;
    let lock = s.run_lock(id);
    let _guard = lock.lock().await;
    Ok(ok(&blocking(&s, move |s| s.finish_run(id, &body)).await?))
}

async fn heartbeat(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let lock = s.run_lock(id);
    let _guard = lock.lock().await;
    let at = blocking(&s, move |s| s.heartbeat(id)).await?;
    Ok(ok(&json!({"heartbeat": at})))
}

async fn annotate(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let body = parse_body(&body)?;
    let annotation = blocking(&s, move |s| s.annotate(id, &body)).await?;
    Ok(ok(&annotation))
}

async fn list_annotations(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    Ok(ok(&blocking(&s, move |s| s.annotations(id)).await?))
}

async fn list_experiments(State(s): State<Shared>) -> Result<Response, ApiError> {
    Ok(ok(&blocking(&s, |s| Ok(s.experiments())).await?))
}

async fn integrity(State(s): State<Shared>) -> Result<Response, ApiError> {
    Ok(ok(&blocking(&s, |s| s.integrity()).await?))
}
