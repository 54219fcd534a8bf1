//! HTTP service for the Altar experiment-record platform.
//!
//! Data lives under one directory: `<data_dir>/db` holds the document store and
//! `<data_dir>/lfs` the content-addressed blob store.

pub mod clock;
pub mod config;
pub mod error;
pub mod routes;
pub mod service;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::ServiceConfig;
pub use error::ApiError;
pub use routes::router;
pub use service::{Service, StartupError};

/// Serves the application on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<Service>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}

/// A server running on its own thread and runtime; stops when dropped.
pub struct BackgroundServer {
    addr: SocketAddr,
    service: Arc<Service>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, StartupError> {
        let listen = config.listen_address;
        let service = Arc::new(Service::open(config, clock)?);
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(listen))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let shared = Arc::clone(&service);
        let thread = std::thread::spawn(move || {
            let served = runtime.block_on(serve(listener, shared, async {
                let _ = stopped.await;
            }));
            if let Err(e) = served {
                eprintln!("altar-server: {e}");
            }
        });
        Ok(Self { addr, service, stop: Some(stop), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}
