mod common;

use std::sync::Arc;

use reqwest::StatusCode;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use altar_core::Timestamp;
use altar_server::service::TRUNCATION_MARKER;
use altar_server::{BackgroundServer, ManualClock};
use common::{failure, movie_config, Harness};

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn run_lifecycle_round_trip() {
    let h = Harness::start();
    let run_id = h.create("get_movie", movie_config());
    assert_eq!(run_id, 1);

    let run: Value = h.get("/api/runs/1").json().unwrap();
    assert_eq!(run["status"], "RUNNING");
    assert_eq!(run["experiment"]["name"], "get_movie");
    assert_eq!(run["config"], movie_config());
    assert_eq!(run["start_time"], run["heartbeat"]);
    assert_eq!(run["stale"], false);
    assert!(run["host"]["hostname"].is_string());

    let points = json!([
        {"name": "Average_fluorescence", "step": 0.0, "value": 1.25},
        {"name": "Average_fluorescence", "step": 0.1, "value": 1.5},
    ]);
    let r = h.post("/api/runs/1/metrics", &points);
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.json::<Value>().unwrap(), json!({"accepted": 2}));
    let series: Value = h.get("/api/runs/1/metrics/Average_fluorescence").json().unwrap();
    assert_eq!(series["steps"], json!([0.0, 0.1]));
    assert_eq!(series["values"], json!([1.25, 1.5]));

    let r = h.post("/api/runs/1/finish", &json!({"event": "complete", "result": 0.93, "captured_out": "done\n"}));
    assert_eq!(r.status(), StatusCode::OK);
    let run: Value = r.json().unwrap();
    assert_eq!(run["status"], "COMPLETED");
    assert_eq!(run["result"], 0.93);
    assert_eq!(run["captured_out"], "done\n");
    assert_eq!(run["metric_names"], json!(["Average_fluorescence"]));
    assert!(run["stop_time"].as_str().unwrap() >= run["start_time"].as_str().unwrap());

    let found: Value = h.get("/api/runs?filter=%7B%22experiment.name%22%3A%22get_movie%22%7D").json().unwrap();
    assert_eq!(found["total"], 1);
    assert_eq!(found["runs"][0]["run_id"], 1);
}

#[test]
fn empty_store_and_experiment_counts() {
    let h = Harness::start();
    assert_eq!(h.get("/api/runs").json::<Value>().unwrap(), json!({"total": 0, "runs": []}));
    assert_eq!(h.get("/api/experiments").json::<Value>().unwrap(), json!([]));
    h.create("a", json!({}));
    h.create("b", json!({}));
    h.create("a", json!({}));
    assert_eq!(
        h.get("/api/experiments").json::<Value>().unwrap(),
        json!([{"name": "a", "run_count": 2}, {"name": "b", "run_count": 1}])
    );
}

#[test]
fn create_run_validation() {
    let h = Harness::start();
    let cases = [
        (json!({"config": {}}), "BadRequest"),
        (json!({"experiment_name": ""}), "BadRequest"),
        (json!({"experiment_name": "x", "config": {"a.b": 1}}), "KeyInvalid"),
        (json!({"experiment_name": "x", "config": {"$set": 1}}), "KeyInvalid"),
        (json!({"experiment_name": "x", "ingest_fingerprint": "nothex"}), "BadRequest"),
    ];
    for (body, code) in cases {
        let (status, got) = failure(h.post("/api/runs", &body));
        assert_eq!((status, got.as_str()), (StatusCode::BAD_REQUEST, code), "{body}");
    }
    let mut deep = json!(1);
    for _ in 0..40 {
        deep = json!({"k": deep});
    }
    let (status, code) = failure(h.post("/api/runs", &json!({"experiment_name": "x", "config": deep})));
    assert_eq!((status, code.as_str()), (StatusCode::BAD_REQUEST, "DepthExceeded"));

    let r = h.http.post(h.url("/api/runs")).body("{oops").send().unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(h.get("/api/runs").json::<Value>().unwrap()["total"], 0);
}

#[test]
fn error_statuses() {
    let h = Harness::start();
    let id = h.create("e", json!({}));
    let metric = |step: f64| json!([{"name": "m", "step": step, "value": 1.0}]);

    assert_eq!(h.post(&format!("/api/runs/{id}/metrics"), &metric(0.1)).status(), StatusCode::OK);
    let (status, code) = failure(h.post(&format!("/api/runs/{id}/metrics"), &metric(0.05)));
    assert_eq!((status, code.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "NonMonotonicStep"));
    // a rejected batch writes nothing
    let bad_batch = json!([{"name": "m", "step": 0.2, "value": 1.0}, {"name": "m", "step": 0.15, "value": 1.0}]);
    assert_eq!(h.post(&format!("/api/runs/{id}/metrics"), &bad_batch).status(), StatusCode::UNPROCESSABLE_ENTITY);
    let series: Value = h.get(&format!("/api/runs/{id}/metrics/m")).json().unwrap();
    assert_eq!(series["steps"], json!([0.1]));

    assert_eq!(h.upload(id, "a.txt", b"x".to_vec()).status(), StatusCode::CREATED);
    let (status, code) = failure(h.upload(id, "a.txt", b"y".to_vec()));
    assert_eq!((status, code.as_str()), (StatusCode::CONFLICT, "DuplicateName"));
    assert_eq!(failure(h.upload(id, "../evil", b"y".to_vec())).0, StatusCode::BAD_REQUEST);

    assert_eq!(h.post(&format!("/api/runs/{id}/heartbeat"), &json!({})).status(), StatusCode::OK);
    assert_eq!(h.finish(id, "complete").status(), StatusCode::OK);

    let (status, code) = failure(h.finish(id, "complete"));
    assert_eq!((status, code.as_str()), (StatusCode::CONFLICT, "IllegalTransition"));
    let (status, code) = failure(h.post(&format!("/api/runs/{id}/metrics"), &metric(5.0)));
    assert_eq!((status, code.as_str()), (StatusCode::CONFLICT, "ImmutableRecord"));
    assert_eq!(failure(h.post(&format!("/api/runs/{id}/heartbeat"), &json!({}))).0, StatusCode::CONFLICT);
    assert_eq!(failure(h.upload(id, "b.txt", b"z".to_vec())).0, StatusCode::CONFLICT);

    for path in ["/api/runs/99", "/api/runs/99/annotations", &format!("/api/runs/{id}/metrics/nope"), &format!("/api/runs/{id}/artifacts/nope")] {
        assert_eq!(failure(h.get(path)).0, StatusCode::NOT_FOUND, "{path}");
    }
    assert_eq!(failure(h.post("/api/runs/99/metrics", &metric(1.0))).0, StatusCode::NOT_FOUND);
    assert_eq!(failure(h.finish(99, "fail")).0, StatusCode::NOT_FOUND);
    assert_eq!(failure(h.upload(99, "a", vec![1])).0, StatusCode::NOT_FOUND);
    assert_eq!(failure(h.get(&format!("/api/blobs/{}", "0".repeat(64)))).0, StatusCode::NOT_FOUND);
    assert_eq!(failure(h.get("/api/blobs/not-a-uid")).0, StatusCode::BAD_REQUEST);
    assert_eq!(failure(h.get("/api/no/such/endpoint")).0, StatusCode::NOT_FOUND);
    assert_eq!(failure(h.get("/api/runs/abc")).0, StatusCode::BAD_REQUEST);
    assert_eq!(failure(h.finish(id, "explode")).0, StatusCode::BAD_REQUEST);
    assert_eq!(failure(h.get("/api/runs?filter=%7B%22a%22%3A%7B%22%24bad%22%3A1%7D%7D")).0, StatusCode::BAD_REQUEST);
}

#[test]
fn finish_rejects_structured_results() {
    let h = Harness::start();
    let id = h.create("e", json!({}));
    let r = h.post(&format!("/api/runs/{id}/finish"), &json!({"event": "complete", "result": [1, 2]}));
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(h.get(&format!("/api/runs/{id}")).json::<Value>().unwrap()["status"], "RUNNING");
    assert_eq!(h.finish(id, "interrupt").json::<Value>().unwrap()["status"], "INTERRUPTED");
}

#[test]
fn artifacts_route_by_size() {
    let threshold = 1000u64;
    let h = Harness::with(|c| c.large_file_threshold_bytes = threshold, Arc::new(altar_server::SystemClock));
    let id = h.create("route", movie_config());
    for size in [0, threshold - 1, threshold, threshold + 1, 3 * threshold] {
        let bytes: Vec<u8> = (0..size).map(|i| (i * 7 % 251) as u8).collect();
        let r = h.upload(id, &format!("f{size}.bin"), bytes.clone());
        assert_eq!(r.status(), StatusCode::CREATED);
        let art: Value = r.json().unwrap();
        assert_eq!(art["size_bytes"], size);
        assert_eq!(art["content_hash"], sha_hex(&bytes));
        let blob = size > threshold;
        assert_eq!(art["kind"], if blob { "BLOB" } else { "INLINE" }, "size {size}");
        let down = h.get(&format!("/api/runs/{id}/artifacts/f{size}.bin")).bytes().unwrap();
        assert_eq!(down.as_ref(), bytes.as_slice());
        if blob {
            let uid = art["blob_uid"].as_str().unwrap();
            assert_eq!(uid, sha_hex(&bytes));
            let direct = h.get(&format!("/api/blobs/{uid}?verify=true")).bytes().unwrap();
            assert_eq!(sha_hex(&direct), uid);
            let manifest = h.server.service().blobs().manifest(&altar_core::BlobUid::parse(uid).unwrap()).unwrap().unwrap();
            assert_eq!(manifest.owners[0].config_snapshot.to_value(), movie_config());
            assert_eq!(manifest.owners[0].run_id, id);
        } else {
            assert!(art["blob_uid"].is_null());
        }
    }
    let nested = h.upload(id, "metrics/deep/name.csv", b"step,value\n".to_vec());
    assert_eq!(nested.status(), StatusCode::CREATED);
    assert_eq!(h.get(&format!("/api/runs/{id}/artifacts/metrics/deep/name.csv")).text().unwrap(), "step,value\n");
    let report: Value = h.get("/api/integrity").json().unwrap();
    for key in ["orphan_blobs", "dangling_refs", "corrupt", "unlinked_owners"] {
        assert_eq!(report[key], json!([]), "{key}");
    }
}

#[test]
fn captured_out_is_capped() {
    let cap = 1 << 20;
    let h = Harness::start();
    let id = h.create("log", json!({}));
    let out = "y".repeat(2 << 20);
    let r = h.post(&format!("/api/runs/{id}/finish"), &json!({"event": "fail", "captured_out": out}));
    let run: Value = r.json().unwrap();
    let stored = run["captured_out"].as_str().unwrap();
    assert_eq!(stored.len(), cap + TRUNCATION_MARKER.len());
    assert!(stored.ends_with(TRUNCATION_MARKER));
    assert_eq!(run["status"], "FAILED");
}

#[test]
fn stale_runs_are_flagged() {
    let clock = Arc::new(ManualClock::new(Timestamp::now()));
    let h = Harness::with(|c| c.heartbeat_stale_secs = 120, clock.clone());
    let id = h.create("slow", json!({}));
    let done = h.create("done", json!({}));
    h.finish(done, "complete");
    let stale_of = |id: i64| h.get(&format!("/api/runs/{id}")).json::<Value>().unwrap()["stale"].clone();

    clock.advance_secs(120);
    assert_eq!(stale_of(id), false);
    clock.advance_secs(1);
    assert_eq!(stale_of(id), true);
    assert_eq!(stale_of(done), false);
    let listed: Value = h.get("/api/runs?sort=run_id").json().unwrap();
    assert_eq!(listed["runs"][0]["stale"], true);

    assert_eq!(h.post(&format!("/api/runs/{id}/heartbeat"), &json!({})).status(), StatusCode::OK);
    assert_eq!(stale_of(id), false);
    // stale is derived, never stored
    let stored = h.server.service().db().get(altar_core::Collection::Runs, id).unwrap();
    assert!(stored.get("stale").is_none());
}

#[test]
fn bearer_token_guards_the_api() {
    let h = Harness::with(|c| c.auth_token = Some("s3cret".into()), Arc::new(altar_server::SystemClock));
    let bare = reqwest::blocking::Client::new();
    let r = bare.get(h.url("/api/runs")).send().unwrap();
    assert_eq!(failure(r), (StatusCode::UNAUTHORIZED, "Unauthorized".to_string()));
    let r = bare.get(h.url("/api/runs")).bearer_auth("wrong").send().unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = bare.post(h.url("/api/runs")).json(&json!({"experiment_name": "x"})).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    assert_eq!(h.get("/api/runs").status(), StatusCode::OK);
    // the viewer shell itself is public
    assert_eq!(bare.get(h.url("/")).send().unwrap().status(), StatusCode::OK);
}

#[test]
fn static_files_are_served_at_root() {
    let h = Harness::start();
    let r = h.get("/");
    assert_eq!(r.status(), StatusCode::OK);
    assert!(r.headers()["content-type"].to_str().unwrap().starts_with("text/html"));
    assert!(r.text().unwrap().contains("/api"));

    let site = tempfile::tempdir().unwrap();
    std::fs::write(site.path().join("index.html"), "<html>viewer</html>").unwrap();
    std::fs::write(site.path().join("app.js"), "console.log(1)").unwrap();
    let dir = site.path().to_path_buf();
    let h = Harness::with(move |c| c.static_dir = Some(dir), Arc::new(altar_server::SystemClock));
    assert_eq!(h.get("/").text().unwrap(), "<html>viewer</html>");
    assert_eq!(h.get("/app.js").text().unwrap(), "console.log(1)");
    assert_eq!(h.get("/api/runs").json::<Value>().unwrap()["total"], 0);
}

#[test]
fn parallel_creates_get_distinct_ids() {
    let h = Harness::start();
    let ids: Vec<i64> = std::thread::scope(|s| {
        let h = &h;
        let handles: Vec<_> = (0..16).map(|i| s.spawn(move || h.create(&format!("p{}", i % 3), json!({"i": i})))).collect();
        handles.into_iter().map(|t| t.join().unwrap()).collect()
    });
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(sorted, (1..=16).collect::<Vec<_>>());
}

#[test]
fn concurrent_metric_appends_to_one_run() {
    let h = Harness::start();
    let id = h.create("c", json!({}));
    std::thread::scope(|s| {
        for t in 0..8 {
            let h = &h;
            s.spawn(move || {
                for k in 0..10 {
                    // distinct series per thread keep steps monotone regardless of interleaving
                    let body = json!([{"name": format!("m{t}"), "step": k as f64, "value": 1.0}]);
                    assert_eq!(h.post(&format!("/api/runs/{id}/metrics"), &body).status(), StatusCode::OK);
                }
            });
        }
    });
    let run: Value = h.get(&format!("/api/runs/{id}")).json().unwrap();
    assert_eq!(run["metric_names"].as_array().unwrap().len(), 8);
    for t in 0..8 {
        let series: Value = h.get(&format!("/api/runs/{id}/metrics/m{t}")).json().unwrap();
        assert_eq!(series["steps"].as_array().unwrap().len(), 10);
    }
}

#[test]
fn annotations_leave_terminal_runs_untouched() {
    let h = Harness::start();
    let id = h.create("a", json!({"x": 1}));
    h.finish(id, "complete");
    let journal = h.data_dir().join("db").join("runs.jsonl");
    let before = std::fs::read(&journal).unwrap();
    let r = h.post(&format!("/api/runs/{id}/annotations"), &json!({"author": "ana", "tags": ["good"], "note": "clean"}));
    assert_eq!(r.status(), StatusCode::OK);
    let note: Value = r.json().unwrap();
    assert_eq!(note["run_id"], id);
    assert_eq!(std::fs::read(&journal).unwrap(), before);
    let list: Value = h.get(&format!("/api/runs/{id}/annotations")).json().unwrap();
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["tags"], json!(["good"]));
    assert_eq!(failure(h.post(&format!("/api/runs/{id}/annotations"), &json!({"note": "x"}))).0, StatusCode::BAD_REQUEST);
}

#[test]
fn acknowledged_writes_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::config_in(dir.path());
    let (run_id, before) = {
        let server = BackgroundServer::start(config.clone(), Arc::new(altar_server::SystemClock)).unwrap();
        let client = reqwest::blocking::Client::new();
        let url = |p: &str| format!("{}{p}", server.url());
        let r: Value = client.post(url("/api/runs")).json(&json!({"experiment_name": "keep", "config": {"g": 2}})).send().unwrap().json().unwrap();
        let id = r["run_id"].as_i64().unwrap();
        client.post(url(&format!("/api/runs/{id}/metrics"))).json(&json!([{"name": "m", "step": 1, "value": 2}])).send().unwrap();
        client.post(url(&format!("/api/runs/{id}/finish"))).json(&json!({"event": "complete", "result": "ok"})).send().unwrap();
        let before: Value = client.get(url(&format!("/api/runs/{id}"))).send().unwrap().json().unwrap();
        (id, before)
    };
    let server = BackgroundServer::start(config, Arc::new(altar_server::SystemClock)).unwrap();
    let after: Value = reqwest::blocking::get(format!("{}/api/runs/{run_id}", server.url())).unwrap().json().unwrap();
    assert_eq!(after, before);
    let next: Value = reqwest::blocking::Client::new()
        .post(format!("{}/api/runs", server.url()))
        .json(&json!({"experiment_name": "next"}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(next["run_id"], run_id + 1);
}
