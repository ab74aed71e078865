//! Start the push listener and HTTP API on their own runtime.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use hemoloop_core::registry::Registry;
use tokio::net::TcpListener;
use tokio::runtime::Runtime;
use tokio::sync::oneshot;

use crate::api::router;
use crate::push::serve_push;
use crate::state::ServiceState;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Port 0 picks a free port.
    pub push_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub token: Option<String>,
    pub workers: usize,
    /// Where the receipt and job logs go.
    pub data_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            push_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            http_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            token: None,
            workers: 2,
            data_dir: None,
        }
    }
}

pub struct RunningServer {
    pub push_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub state: Arc<ServiceState>,
    runtime: Option<Runtime>,
    stop: Option<oneshot::Sender<()>>,
}

impl RunningServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    /// Block until Ctrl-C.
    pub fn wait_for_ctrl_c(&self) -> std::io::Result<()> {
        self.runtime.as_ref().expect("runtime is live").block_on(tokio::signal::ctrl_c())
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(std::time::Duration::from_secs(2));
        }
        self.state.jobs.shutdown();
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

pub fn start(registry: Arc<Registry>, config: ServerConfig) -> std::io::Result<RunningServer> {
    let state = Arc::new(ServiceState::new(
        registry,
        config.workers,
        config.token.clone(),
        config.data_dir.as_deref(),
    )?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .thread_name("hemoloop-io")
        .build()?;
    let (push, http) = runtime.block_on(async {
        Ok::<_, std::io::Error>((
            TcpListener::bind(config.push_addr).await?,
            TcpListener::bind(config.http_addr).await?,
        ))
    })?;
    let push_addr = push.local_addr()?;
    let http_addr = http.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    runtime.spawn(serve_push(push, state.clone()));
    let app = router(state.clone());
    runtime.spawn(async move {
        let served = axum::serve(http, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = served.await {
            tracing::error!("http server failed: {e}");
        }
    });
    tracing::info!(%push_addr, %http_addr, "hemoloop service listening");
    Ok(RunningServer {
        push_addr,
        http_addr,
        state,
        runtime: Some(runtime),
        stop: Some(tx),
    })
}
