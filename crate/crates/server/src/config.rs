use std::net::SocketAddr;
use std::path::PathBuf;

/// 25 MiB: artifacts strictly larger than this go to the blob store.
pub const DEFAULT_LARGE_FILE_THRESHOLD: u64 = 25 * 1024 * 1024;
pub const DEFAULT_HEARTBEAT_STALE_SECS: u64 = 120;
pub const DEFAULT_CAPTURED_OUT_CAP: usize = 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub listen_address: SocketAddr,
    pub data_dir: PathBuf,
    pub large_file_threshold_bytes: u64,
    pub auth_token: Option<String>,
    pub heartbeat_stale_secs: u64,
    pub captured_out_cap_bytes: usize,
    /// Served at `/` when set (the browser viewer).
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen_address: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: data_dir.into(),
            large_file_threshold_bytes: DEFAULT_LARGE_FILE_THRESHOLD,
            auth_token: None,
            heartbeat_stale_secs: DEFAULT_HEARTBEAT_STALE_SECS,
            captured_out_cap_bytes: DEFAULT_CAPTURED_OUT_CAP,
            static_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.large_file_threshold_bytes == 0 {
            return Err("the large-file threshold must be positive".into());
        }
        if self.auth_token.as_deref() == Some("") {
            return Err("the auth token must not be empty".into());
        }
        Ok(())
    }
}
