#![allow(dead_code)]

use std::sync::Arc;

use reqwest::blocking::{multipart, Client, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};

use altar_server::{BackgroundServer, Clock, ServiceConfig, SystemClock};

/// The `get_movie` configuration: 100 s at 10 Hz, gain 10.
pub fn movie_config() -> Value {
    json!({
        "exp_duration": 100,
        "frame_acquisition": {"frame_rate": 10, "exposure": 100, "gain": 10},
        "pulse": {"pulse_frequency": 1, "pulse_delay": 3, "pulse_amplitude": 10, "LED_pin": 1},
        "plant_species": "Arabidopsis_Thaliana",
        "port_camera": "COM3",
        "port_control": "COM6",
        "save_folder": "demo/"
    })
}

pub struct Harness {
    pub server: BackgroundServer,
    pub http: Client,
    pub dir: tempfile::TempDir,
    token: Option<String>,
}

pub fn config_in(dir: &std::path::Path) -> ServiceConfig {
    let mut config = ServiceConfig::new(dir.join("data"));
    config.listen_address = "127.0.0.1:0".parse().unwrap();
    config
}

impl Harness {
    pub fn start() -> Self {
        Self::with(|_| {}, Arc::new(SystemClock))
    }

    pub fn with(tweak: impl FnOnce(&mut ServiceConfig), clock: Arc<dyn Clock>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut config = config_in(dir.path());
        tweak(&mut config);
        let token = config.auth_token.clone();
        let server = BackgroundServer::start(config, clock).unwrap();
        Self { server, http: Client::new(), dir, token }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.server.url())
    }

    fn auth(&self, rb: reqwest::blocking::RequestBuilder) -> reqwest::blocking::RequestBuilder {
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    pub fn get(&self, path: &str) -> Response {
        self.auth(self.http.get(self.url(path))).send().unwrap()
    }

    pub fn post(&self, path: &str, body: &Value) -> Response {
        self.auth(self.http.post(self.url(path)).json(body)).send().unwrap()
    }

    pub fn upload(&self, run_id: i64, name: &str, bytes: Vec<u8>) -> Response {
        let form = multipart::Form::new()
            .text("name", name.to_string())
            .text("media_type", "application/octet-stream")
            .part("file", multipart::Part::bytes(bytes).file_name("upload"));
        self.auth(self.http.post(self.url(&format!("/api/runs/{run_id}/artifacts"))).multipart(form))
            .send()
            .unwrap()
    }

    pub fn create(&self, name: &str, config: Value) -> i64 {
        let r = self.post("/api/runs", &json!({"experiment_name": name, "config": config}));
        assert_eq!(r.status(), StatusCode::CREATED);
        r.json::<Value>().unwrap()["run_id"].as_i64().unwrap()
    }

    pub fn finish(&self, run_id: i64, event: &str) -> Response {
        self.post(&format!("/api/runs/{run_id}/finish"), &json!({"event": event}))
    }

    pub fn data_dir(&self) -> std::path::PathBuf {
        self.dir.path().join("data")
    }
}

/// Status and `error` code of a failed response.
pub fn failure(r: Response) -> (StatusCode, String) {
    let status = r.status();
    let body: Value = r.json().unwrap();
    assert!(body["message"].is_string(), "{body}");
    (status, body["error"].as_str().unwrap().to_string())
}
