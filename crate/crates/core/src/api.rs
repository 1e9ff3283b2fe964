//! Producer and consumer factories addressed by pseudo-URL.
//!
//! ```no_run
//! # async fn demo(tree: mqware::config::ConfigTree) -> Result<(), mqware::api::MqError> {
//! use std::sync::Arc;
//! use std::time::Duration;
//! use mqware::api::{create_consumer, create_producer, ConsumerOptions, DeliveryMode, ProducerOptions};
//! use mqware::connector::ConnectorRegistry;
//! use mqware::manager::ConnectionManager;
//!
//! let manager = ConnectionManager::new(ConnectorRegistry::default());
//! let producer = create_producer(&manager, &tree, "broker.local::Queue::Q1", ProducerOptions::default()).await?;
//! producer.put(serde_json::json!({"hello": "world"})).await?;
//! let consumer = create_consumer(&manager, &tree, "broker.local::Queue::Q1", DeliveryMode::buffered(), ConsumerOptions::default()).await?;
//! let first = consumer.get(Duration::from_secs(1)).await?;
//! producer.close().await;
//! consumer.close().await;
//! # let _ = first; Ok(()) }
//! ```

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::Value;
use tokio::sync::Notify;
use tracing::debug;

use crate::config::{resolve, ConfigError, ConfigTree, ResolvedDestination};
use crate::connector::{
    AckMode, ConnectError, Delivery, HandlerError, MessageHandler, Session, SessionError,
    SubscriptionId, SubscriptionSpec, SupervisedSession,
};
use crate::manager::{ConnectionManager, ManagerError, Role, UserToken};
use crate::message::{make_envelope, Clock, MessageEnvelope, SystemClock};
use crate::spool::{FailoverError, FailoverSpool};

pub const DEFAULT_BUFFER_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Delivered,
    Spooled,
}

#[derive(Debug, thiserror::Error)]
pub enum MqError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Connect(#[from] ConnectError),
    #[error("unknown or already released token {0:?}")]
    UnknownToken(String),
    #[error("send failed: {0}")]
    SendFailed(String),
    #[error("spool full: {0}")]
    SpoolFull(String),
    #[error("invalid JSON payload: {0}")]
    InvalidJson(String),
    #[error("producer is closed")]
    ProducerClosed,
    #[error("consumer is closed")]
    ConsumerClosed,
    #[error("get() is only available on buffered consumers")]
    WrongMode,
    #[error("subscribe failed: {0}")]
    Subscribe(SessionError),
}

impl From<ManagerError> for MqError {
    fn from(e: ManagerError) -> Self {
        match e {
            ManagerError::Config(c) => MqError::Config(c),
            ManagerError::Connect(c) => MqError::Connect(c),
            ManagerError::UnknownToken(t) => MqError::UnknownToken(t),
        }
    }
}

#[derive(Clone)]
pub struct ProducerOptions {
    /// Wait for a broker receipt on every put.
    pub confirm: bool,
    /// Fallback spool; puts go there while the broker is unreachable.
    pub spool: Option<Arc<FailoverSpool>>,
    /// Value of the `origin` header; defaults to the host name.
    pub origin: Option<String>,
    pub clock: Arc<dyn Clock>,
}

impl Default for ProducerOptions {
    fn default() -> Self {
        ProducerOptions {
            confirm: false,
            spool: None,
            origin: None,
            clock: Arc::new(SystemClock),
        }
    }
}

impl ProducerOptions {
    pub fn with_spool(spool: Arc<FailoverSpool>) -> Self {
        ProducerOptions {
            confirm: true,
            spool: Some(spool),
            ..Default::default()
        }
    }
}

pub fn default_origin() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .filter(|h| !h.is_empty())
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok().map(|h| h.trim().to_string()))
        .filter(|h| !h.is_empty())
        .unwrap_or_else(|| "localhost".into())
}

pub struct Producer {
    manager: Arc<ConnectionManager>,
    token: UserToken,
    resolved: ResolvedDestination,
    session: Arc<SupervisedSession>,
    options: ProducerOptions,
    origin: String,
    gate: tokio::sync::Mutex<()>,
    closed: AtomicBool,
}

pub async fn create_producer(
    manager: &Arc<ConnectionManager>,
    tree: &ConfigTree,
    query: &str,
    options: ProducerOptions,
) -> Result<Producer, MqError> {
    let resolved = resolve(tree, query)?;
    let (session, token) = manager.acquire_resolved(&resolved, Role::Producer).await?;
    if let Some(spool) = &options.spool {
        spool.attach(Arc::clone(&session) as Arc<dyn Session>);
    }
    let origin = options.origin.clone().unwrap_or_else(default_origin);
    debug!(token = %token, "producer created");
    Ok(Producer {
        manager: Arc::clone(manager),
        token,
        resolved,
        session,
        options,
        origin,
        gate: tokio::sync::Mutex::new(()),
        closed: AtomicBool::new(false),
    })
}

impl Producer {
    pub fn token(&self) -> &UserToken {
        &self.token
    }

    pub fn wire_path(&self) -> &str {
        &self.resolved.wire_path
    }

    pub fn session(&self) -> &Arc<SupervisedSession> {
        &self.session
    }

    pub fn spool(&self) -> Option<&Arc<FailoverSpool>> {
        self.options.spool.as_ref()
    }

    pub async fn put(&self, payload: Value) -> Result<PutOutcome, MqError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(MqError::ProducerClosed);
        }
        let env = make_envelope(payload, &self.origin, &self.resolved.wire_path, self.options.clock.as_ref());
        self.put_envelope(&env).await
    }

    /// Parses `text` as JSON and puts it.
    pub async fn put_json(&self, text: &str) -> Result<PutOutcome, MqError> {
        let payload: Value = serde_json::from_str(text).map_err(|e| MqError::InvalidJson(e.to_string()))?;
        self.put(payload).await
    }

    /// Puts a prepared envelope (its destination header is not rewritten).
    pub async fn put_envelope(&self, env: &MessageEnvelope) -> Result<PutOutcome, MqError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(MqError::ProducerClosed);
        }
        let _serial = self.gate.lock().await;
        let path = &self.resolved.wire_path;
        match &self.options.spool {
            Some(spool) => spool
                .put_with_failover(self.session.as_ref(), path, env, self.options.confirm)
                .await
                .map_err(|e| match e {
                    FailoverError::DiskFull(m) => MqError::SpoolFull(m),
                    other => MqError::SendFailed(other.to_string()),
                }),
            None => self
                .session
                .put(path, env, self.options.confirm)
                .await
                .map(|()| PutOutcome::Delivered)
                .map_err(|e| MqError::SendFailed(e.to_string())),
        }
    }

    /// Releases the producer's token. Idempotent.
    pub async fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Some(spool) = &self.options.spool {
            spool.detach();
        }
        if let Err(e) = self.manager.release(&self.token).await {
            debug!(error = %e, "producer release");
        }
    }
}

/// How a consumer hands messages to the application.
pub enum DeliveryMode {
    /// The handler runs serially on the session's reader task; an error
    /// NACKs the message.
    Callback(MessageHandler),
    /// Messages queue up for [`Consumer::get`]; once `capacity` is reached
    /// the oldest entry is dropped.
    Buffered { capacity: usize },
}

impl DeliveryMode {
    pub fn buffered() -> Self {
        DeliveryMode::Buffered {
            capacity: DEFAULT_BUFFER_CAPACITY,
        }
    }

    pub fn callback<F>(f: F) -> Self
    where
        F: Fn(&Delivery) -> Result<(), HandlerError> + Send + Sync + 'static,
    {
        DeliveryMode::Callback(Arc::new(f))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConsumerOptions {
    pub ack_mode: AckMode,
}

impl Default for ConsumerOptions {
    fn default() -> Self {
        ConsumerOptions {
            ack_mode: AckMode::ClientIndividual,
        }
    }
}

struct Buffer {
    queue: Mutex<VecDeque<MessageEnvelope>>,
    capacity: usize,
    dropped: AtomicU64,
    notify: Notify,
}

impl Buffer {
    fn push(&self, env: MessageEnvelope) {
        {
            let mut q = self.queue.lock();
            q.push_back(env);
            while q.len() > self.capacity {
                q.pop_front();
                self.dropped.fetch_add(1, Ordering::SeqCst);
            }
        }
        self.notify.notify_one();
    }
}

pub struct Consumer {
    manager: Arc<ConnectionManager>,
    token: UserToken,
    resolved: ResolvedDestination,
    session: Arc<SupervisedSession>,
    subscription: SubscriptionId,
    buffer: Option<Arc<Buffer>>,
    closed: AtomicBool,
}

pub async fn create_consumer(
    manager: &Arc<ConnectionManager>,
    tree: &ConfigTree,
    query: &str,
    mode: DeliveryMode,
    options: ConsumerOptions,
) -> Result<Consumer, MqError> {
    let resolved = resolve(tree, query)?;
    let (handler, buffer): (MessageHandler, _) = match mode {
        DeliveryMode::Callback(h) => (h, None),
        DeliveryMode::Buffered { capacity } => {
            let buffer = Arc::new(Buffer {
                queue: Mutex::new(VecDeque::new()),
                capacity: capacity.max(1),
                dropped: AtomicU64::new(0),
                notify: Notify::new(),
            });
            let sink = Arc::clone(&buffer);
            let handler: MessageHandler = Arc::new(move |d: &Delivery| {
                sink.push(d.envelope.clone());
                Ok(())
            });
            (handler, Some(buffer))
        }
    };
    let (session, token) = manager.acquire_resolved(&resolved, Role::Consumer).await?;
    let spec = SubscriptionSpec {
        wire_path: resolved.wire_path.clone(),
        ack_mode: options.ack_mode,
        handler,
    };
    let subscription = match session.subscribe(spec).await {
        Ok(id) => id,
        Err(e) => {
            let _ = manager.release(&token).await;
            return Err(MqError::Subscribe(e));
        }
    };
    debug!(token = %token, "consumer created");
    Ok(Consumer {
        manager: Arc::clone(manager),
        token,
        resolved,
        session,
        subscription,
        buffer,
        closed: AtomicBool::new(false),
    })
}

impl Consumer {
    pub fn token(&self) -> &UserToken {
        &self.token
    }

    pub fn wire_path(&self) -> &str {
        &self.resolved.wire_path
    }

    pub fn session(&self) -> &Arc<SupervisedSession> {
        &self.session
    }

    /// Messages discarded by the buffer's drop-oldest policy.
    pub fn dropped(&self) -> u64 {
        self.buffer.as_ref().map_or(0, |b| b.dropped.load(Ordering::SeqCst))
    }

    /// Next buffered message in delivery order, or `None` after `timeout`.
    pub async fn get(&self, timeout: Duration) -> Result<Option<MessageEnvelope>, MqError> {
        let buffer = self.buffer.as_ref().ok_or(MqError::WrongMode)?;
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if self.closed.load(Ordering::SeqCst) {
                return Err(MqError::ConsumerClosed);
            }
            let notified = buffer.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(env) = buffer.queue.lock().pop_front() {
                return Ok(Some(env));
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Ok(buffer.queue.lock().pop_front());
            }
        }
    }

    /// Unsubscribes and releases the token. Idempotent.
    pub async fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Some(b) = &self.buffer {
            b.notify.notify_waiters();
        }
        if let Err(e) = self.session.unsubscribe(self.subscription).await {
            debug!(error = %e, "unsubscribe on close");
        }
        if let Err(e) = self.manager.release(&self.token).await {
            debug!(error = %e, "consumer release");
        }
    }
}
