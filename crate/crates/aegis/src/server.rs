//! Serving a router: in the foreground over TLS or plain TCP, or on a
//! background thread for tests and local tooling.

use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::thread::JoinHandle;

use axum::Router;
use axum_server::tls_rustls::RustlsConfig;
use tokio::sync::oneshot;

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
}

/// Plain HTTP until interrupted.
pub fn serve_plain(router: Router, addr: SocketAddr) -> std::io::Result<()> {
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router)
            .with_graceful_shutdown(interrupted())
            .await
    })
}

/// HTTPS until interrupted. `cert` and `key` are PEM files.
pub fn serve_tls(router: Router, addr: SocketAddr, cert: &Path, key: &Path) -> std::io::Result<()> {
    runtime()?.block_on(async move {
        let config = RustlsConfig::from_pem_file(cert, key).await?;
        let handle = axum_server::Handle::new();
        let h = handle.clone();
        tokio::spawn(async move {
            interrupted().await;
            h.graceful_shutdown(None);
        });
        let server = axum_server::bind_rustls(addr, config).handle(handle.clone());
        let announce = handle.clone();
        tokio::spawn(async move {
            if let Some(a) = announce.listening().await {
                eprintln!("listening on https://{a}");
            }
        });
        server.serve(router.into_make_service()).await
    })
}

async fn interrupted() {
    let _ = tokio::signal::ctrl_c().await;
}

/// A server on its own thread and runtime. Stops when dropped.
pub struct Background {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Background {
    /// Bind `addr` (port 0 picks a free port) and serve plain HTTP.
    pub fn spawn(router: Router, addr: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let rt = runtime()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)
                    .expect("listener registers with runtime");
                let stop = async move {
                    let _ = rx.await;
                };
                let _ = axum::serve(listener, router)
                    .with_graceful_shutdown(stop)
                    .await;
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    /// Same as [`Background::spawn`] over TLS.
    pub fn spawn_tls(
        router: Router,
        addr: SocketAddr,
        cert_pem: Vec<u8>,
        key_pem: Vec<u8>,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let rt = runtime()?;
        let config = rt.block_on(RustlsConfig::from_pem(cert_pem, key_pem))?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let handle = axum_server::Handle::new();
                let h = handle.clone();
                tokio::spawn(async move {
                    let _ = rx.await;
                    h.shutdown();
                });
                let _ = axum_server::from_tcp_rustls(listener, config)
                    .handle(handle)
                    .serve(router.into_make_service())
                    .await;
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for Background {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
