//! In-memory STOMP 1.2 broker.
//!
//! Queues (`/queue/<name>`) hand each message to one subscriber, strictly
//! round-robin with one unacknowledged message per client-individual
//! subscription; NACKed messages go back to the head of the queue and move
//! to `/queue/DLQ.<name>` after the redelivery cap. Topics (`/topic/<name>`)
//! copy each message to every current subscriber and retain nothing.
//!
//! ```no_run
//! # async fn demo() -> Result<(), mqware_broker::BrokerError> {
//! let broker = mqware_broker::start(mqware_broker::BrokerConfig::ephemeral()
//!     .with_user("pilot", "env:PILOT_MQ_PASSWORD")).await?;
//! println!("listening on {}", broker.addr().unwrap());
//! broker.shutdown().await;
//! # Ok(()) }
//! ```

mod config;
mod core;
mod log;
mod session;
mod tls;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::net::{TcpListener, TcpSocket};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_rustls::TlsAcceptor;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info};

pub use crate::config::{BrokerConfig, ServerTlsConfig, UserEntry, DEFAULT_LISTEN, DEFAULT_TLS_LISTEN};
pub use crate::core::{BrokerStats, QueueStats};
pub use crate::log::{max_concurrent_sessions, SessionLog};

use crate::core::CoreMsg;
use crate::session::{run_session, Peer};

const TLS_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("broker config: {0}")]
    Config(String),
    #[error("broker TLS setup: {0}")]
    Tls(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("session log: {0}")]
    Log(std::io::Error),
}

pub(crate) struct Shared {
    pub config: BrokerConfig,
    pub passwords: HashMap<String, String>,
    pub core: mpsc::UnboundedSender<CoreMsg>,
    pub log: Arc<SessionLog>,
    pub heartbeats_suppressed: AtomicBool,
    pub next_session: AtomicU64,
    pub stop: CancellationToken,
}

/// A running broker. Dropping the handle does not stop it; call
/// [`BrokerHandle::shutdown`].
pub struct BrokerHandle {
    shared: Arc<Shared>,
    addr: Option<SocketAddr>,
    tls_addr: Option<SocketAddr>,
    tasks: Vec<JoinHandle<()>>,
}

/// Binds the configured listeners and starts serving.
pub async fn start(config: BrokerConfig) -> Result<BrokerHandle, BrokerError> {
    let log = match &config.log_path {
        Some(p) => SessionLog::with_file(p).map_err(BrokerError::Log)?,
        None => SessionLog::in_memory(),
    };
    start_with_log(config, Arc::new(log)).await
}

/// Like [`start`], appending session events to an existing log (useful to
/// keep one log across a restart).
pub async fn start_with_log(config: BrokerConfig, log: Arc<SessionLog>) -> Result<BrokerHandle, BrokerError> {
    config.validate()?;
    let mut passwords = HashMap::new();
    for (user, entry) in &config.users {
        let secret = mqware::config::resolve_secret(&entry.password_ref)
            .map_err(|e| BrokerError::Config(format!("user {user}: {e}")))?;
        passwords.insert(user.clone(), secret);
    }
    let acceptor = match &config.tls {
        Some(tls) if config.tls_listen.is_some() => Some(TlsAcceptor::from(tls::server_config(tls)?)),
        _ => None,
    };
    let plain = match config.listen {
        Some(addr) => Some(bind(addr)?),
        None => None,
    };
    let secure = match config.tls_listen {
        Some(addr) => Some(bind(addr)?),
        None => None,
    };

    let (core_tx, core_rx) = mpsc::unbounded_channel();
    let stop = CancellationToken::new();
    let shared = Arc::new(Shared {
        passwords,
        core: core_tx,
        log,
        heartbeats_suppressed: AtomicBool::new(false),
        next_session: AtomicU64::new(1),
        stop: stop.clone(),
        config,
    });
    let mut tasks = Vec::new();
    let (depth, redeliveries) = (shared.config.queue_depth_limit, shared.config.max_redeliveries);
    let core_stop = stop.clone();
    tasks.push(tokio::spawn(async move {
        tokio::select! {
            _ = core::run_core(core_rx, depth, redeliveries) => {}
            _ = core_stop.cancelled() => {}
        }
    }));

    let addr = plain.as_ref().and_then(|l| l.local_addr().ok());
    let tls_addr = secure.as_ref().and_then(|l| l.local_addr().ok());
    if let Some(listener) = plain {
        tasks.push(tokio::spawn(accept_loop(listener, None, Arc::clone(&shared))));
    }
    if let (Some(listener), Some(acceptor)) = (secure, acceptor) {
        tasks.push(tokio::spawn(accept_loop(listener, Some(acceptor), Arc::clone(&shared))));
    }
    info!(?addr, ?tls_addr, "broker listening");
    Ok(BrokerHandle {
        shared,
        addr,
        tls_addr,
        tasks,
    })
}

fn bind(addr: SocketAddr) -> Result<TcpListener, BrokerError> {
    let err = |source| BrokerError::Bind { addr, source };
    let socket = if addr.is_ipv4() {
        TcpSocket::new_v4()
    } else {
        TcpSocket::new_v6()
    }
    .map_err(err)?;
    socket.set_reuseaddr(true).map_err(err)?;
    socket.bind(addr).map_err(err)?;
    socket.listen(1024).map_err(err)
}

async fn accept_loop(listener: TcpListener, acceptor: Option<TlsAcceptor>, shared: Arc<Shared>) {
    loop {
        let (stream, addr) = tokio::select! {
            _ = shared.stop.cancelled() => return,
            r = listener.accept() => match r {
                Ok(conn) => conn,
                Err(e) => {
                    debug!(error = %e, "accept failed");
                    continue;
                }
            },
        };
        let _ = stream.set_nodelay(true);
        let shared = Arc::clone(&shared);
        match &acceptor {
            None => {
                let peer = Peer {
                    addr,
                    tls: false,
                    cert_cn: None,
                };
                tokio::spawn(run_session(stream, peer, shared));
            }
            Some(acceptor) => {
                let acceptor = acceptor.clone();
                tokio::spawn(async move {
                    let tls_stream = match tokio::time::timeout(TLS_HANDSHAKE_TIMEOUT, acceptor.accept(stream)).await {
                        Ok(Ok(s)) => s,
                        Ok(Err(e)) => {
                            shared.log.record(
                                "tls_handshake_failed",
                                serde_json::json!({"peer": addr.to_string(), "error": e.to_string()}),
                            );
                            return;
                        }
                        Err(_) => return,
                    };
                    let cert_cn = tls_stream
                        .get_ref()
                        .1
                        .peer_certificates()
                        .and_then(|certs| certs.first())
                        .and_then(|c| tls::common_name(c.as_ref()));
                    let peer = Peer {
                        addr,
                        tls: true,
                        cert_cn,
                    };
                    run_session(tls_stream, peer, shared).await;
                });
            }
        }
    }
}

impl BrokerHandle {
    /// Plain TCP listener address.
    pub fn addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    pub fn tls_addr(&self) -> Option<SocketAddr> {
        self.tls_addr
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.shared.config
    }

    pub fn log(&self) -> &Arc<SessionLog> {
        &self.shared.log
    }

    /// Test hook: stop emitting heart-beats on every session.
    pub fn set_heartbeats_suppressed(&self, suppressed: bool) {
        self.shared.heartbeats_suppressed.store(suppressed, Ordering::SeqCst);
    }

    pub async fn stats(&self) -> BrokerStats {
        let (tx, rx) = oneshot::channel();
        if self.shared.core.send(CoreMsg::Stats { reply: tx }).is_err() {
            return BrokerStats::default();
        }
        rx.await.unwrap_or_default()
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stop.is_cancelled()
    }

    /// Resolves once shutdown has been requested.
    pub async fn stopped(&self) {
        self.shared.stop.cancelled().await
    }

    /// Stops listening, drops every connection and discards all stored
    /// messages. The ports are free once this returns.
    pub async fn shutdown(self) {
        self.shared.stop.cancel();
        for task in self.tasks {
            let _ = task.await;
        }
        // give session tasks a moment to close their sockets
        tokio::task::yield_now().await;
    }

    /// Shutdown trigger usable without consuming the handle.
    pub fn stop_token(&self) -> CancellationToken {
        self.shared.stop.clone()
    }
}
