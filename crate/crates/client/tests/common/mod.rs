#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use altar_client::ApiClient;
use altar_server::{BackgroundServer, ServiceConfig, SystemClock};

pub struct Live {
    pub server: BackgroundServer,
    pub client: ApiClient,
    pub dir: tempfile::TempDir,
}

pub fn live() -> Live {
    live_with(|_| {})
}

pub fn live_with(tweak: impl FnOnce(&mut ServiceConfig)) -> Live {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path().join("data"));
    config.listen_address = "127.0.0.1:0".parse().unwrap();
    tweak(&mut config);
    let token = config.auth_token.clone();
    let server = BackgroundServer::start(config, Arc::new(SystemClock)).unwrap();
    let client = ApiClient::new(&server.url(), token).unwrap();
    Live { server, client, dir }
}

pub fn write(dir: &Path, rel: &str, content: &[u8]) {
    let path = dir.join(rel);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, content).unwrap();
}

/// A folder shaped like the `get_movie` acquisition: config, one metric CSV, a video.
pub fn movie_folder(dir: &Path, points: usize, video: &[u8]) {
    write(
        dir,
        "config.json",
        br#"{"exp_duration": 100, "frame_acquisition": {"frame_rate": 10, "exposure": 100, "gain": 10}, "plant_species": "Arabidopsis_Thaliana"}"#,
    );
    let mut csv = String::from("step,value\n");
    for i in 0..points {
        csv.push_str(&format!("{},{}\n", i as f64 / 10.0, 100.0 + (i % 17) as f64 / 4.0));
    }
    write(dir, "metrics/Average_fluorescence.csv", csv.as_bytes());
    write(dir, "video.bin", video);
}
