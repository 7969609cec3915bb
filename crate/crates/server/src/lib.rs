//! HTTP+JSON annotation service.
//!
//! Handlers run concurrently on tokio; every mutation goes through one
//! bounded command queue to a worker thread that owns the model, so clicks
//! are applied strictly in order and at most one session adapts the live
//! parameters at a time. Reads are served from the snapshot the worker
//! publishes after each command.

pub mod config;
mod engine;
mod error;
mod http;
mod store;

use std::future::Future;
use std::net::SocketAddr;

use tokio::sync::{mpsc, oneshot};

pub use config::ServerConfig;
pub use error::{ApiError, ServerError};
pub use store::CheckpointStore;

/// A server bound to a socket. Dropping it does not stop it; call
/// [`RunningServer::shutdown`].
pub struct RunningServer {
    pub addr: SocketAddr,
    stop: oneshot::Sender<()>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
    worker: std::thread::JoinHandle<()>,
}

impl RunningServer {
    /// Stops accepting requests, waits for in-flight ones, then stops the
    /// worker.
    pub async fn shutdown(self) -> std::io::Result<()> {
        let _ = self.stop.send(());
        let served = self
            .task
            .await
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        tokio::task::spawn_blocking(move || self.worker.join())
            .await
            .map_err(|e| std::io::Error::other(e.to_string()))?
            .map_err(|_| std::io::Error::other("engine thread panicked"))?;
        served
    }
}

/// Loads the model, binds `cfg.listen` and starts serving in the background.
pub async fn spawn(cfg: ServerConfig) -> Result<RunningServer, ServerError> {
    let (stop, stopped) = oneshot::channel::<()>();
    let (addr, serve, worker) = bind(cfg, async {
        let _ = stopped.await;
    })
    .await?;
    let task = tokio::spawn(serve);
    Ok(RunningServer {
        addr,
        stop,
        task,
        worker,
    })
}

/// Serves until `shutdown` resolves.
pub async fn run(cfg: ServerConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServerError> {
    let (addr, serve, worker) = bind(cfg, shutdown).await?;
    log::info!("listening on http://{addr}");
    serve.await?;
    tokio::task::spawn_blocking(move || worker.join())
        .await
        .map_err(|e| ServerError::Config(e.to_string()))?
        .map_err(|_| ServerError::Config("engine thread panicked".into()))?;
    Ok(())
}

async fn bind(
    cfg: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<
    (
        SocketAddr,
        impl Future<Output = std::io::Result<()>> + Send + 'static,
        std::thread::JoinHandle<()>,
    ),
    ServerError,
> {
    cfg.validate()?;
    let engine_cfg = cfg.clone();
    let engine = tokio::task::spawn_blocking(move || engine::Engine::open(&engine_cfg))
        .await
        .map_err(|e| ServerError::Config(e.to_string()))??;
    let (tx, rx) = mpsc::channel(cfg.queue_depth);
    let state = http::AppState {
        commands: tx,
        snapshots: engine.snapshots(),
        retry_after: cfg.retry_after_secs,
    };
    let worker = std::thread::Builder::new()
        .name("clickforge-engine".into())
        .spawn(move || engine.run(rx))?;
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    let addr = listener.local_addr()?;
    let app = http::router(state);
    let serve = async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown)
            .await
    };
    Ok((addr, serve, worker))
}
