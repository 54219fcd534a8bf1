use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;

use altar_server::config::{DEFAULT_CAPTURED_OUT_CAP, DEFAULT_HEARTBEAT_STALE_SECS, DEFAULT_LARGE_FILE_THRESHOLD};
use altar_server::{serve, Service, ServiceConfig, SystemClock};

/// Altar experiment-record service.
#[derive(Debug, Parser)]
#[command(name = "altar-server", version)]
struct Args {
    /// Address to listen on (port 0 picks a free port).
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Directory holding the document store and blob store.
    #[arg(long, default_value = "altar-data")]
    data_dir: PathBuf,
    /// Artifacts larger than this many bytes go to the blob store.
    #[arg(long, default_value_t = DEFAULT_LARGE_FILE_THRESHOLD)]
    threshold_bytes: u64,
    /// Require this bearer token on the API. `ALTAR_TOKEN` takes precedence.
    #[arg(long)]
    token: Option<String>,
    /// Serve the viewer from this directory at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HEARTBEAT_STALE_SECS)]
    heartbeat_stale_secs: u64,
    #[arg(long, default_value_t = DEFAULT_CAPTURED_OUT_CAP)]
    captured_out_cap_bytes: usize,
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn main() -> ExitCode {
    let args = Args::parse();
    let token = std::env::var("ALTAR_TOKEN").ok().filter(|t| !t.is_empty()).or(args.token);
    let config = ServiceConfig {
        listen_address: args.listen,
        data_dir: args.data_dir,
        large_file_threshold_bytes: args.threshold_bytes,
        auth_token: token,
        heartbeat_stale_secs: args.heartbeat_stale_secs,
        captured_out_cap_bytes: args.captured_out_cap_bytes,
        static_dir: args.static_dir,
    };

    let service = match Service::open(config, Arc::new(SystemClock)) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("altar-server: {e}");
            return ExitCode::FAILURE;
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("altar-server: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(service.config().listen_address).await?;
        let addr = listener.local_addr()?;
        println!("listening on {addr}");
        std::io::stdout().flush()?;
        serve(listener, service, shutdown_signal()).await
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("altar-server: {e}");
            ExitCode::FAILURE
        }
    }
}
