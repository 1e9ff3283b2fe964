//! Pluggable protocol handlers.
//!
//! A [`Connector`] opens [`Session`]s for one protocol. The
//! [`ConnectorRegistry`] maps the `MQType` of a service section to its
//! connector, so a new protocol is added by registering another
//! implementation; callers never name the concrete type.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use tokio::sync::broadcast;

use crate::config::{AuthConfig, MqServiceConfig, ReconnectPolicy, TlsSettings};
use crate::message::MessageEnvelope;
use crate::stomp::HeartbeatPlan;

pub mod loopback;
pub mod stomp;
pub mod supervisor;
pub mod tls;

pub use loopback::{LoopbackConnector, LoopbackHub};
pub use stomp::{StompConnector, StompSession};
pub use supervisor::{run_reconnect_loop, Backoff, SessionFactory, SupervisedSession};

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
pub const RECEIPT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DISCONNECT_RECEIPT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectorParams {
    pub host: String,
    pub port: u16,
    pub virtual_host: String,
    pub auth: AuthConfig,
    pub tls: TlsSettings,
    /// (can-send, wants-to-receive) in milliseconds.
    pub heartbeat: (u64, u64),
    pub reconnect: ReconnectPolicy,
    pub connect_timeout: Duration,
}

impl ConnectorParams {
    pub fn from_service(svc: &MqServiceConfig) -> Self {
        ConnectorParams {
            host: svc.host.clone(),
            port: svc.port,
            virtual_host: svc.virtual_host.clone().unwrap_or_else(|| svc.host.clone()),
            auth: svc.auth.clone(),
            tls: svc.tls.clone(),
            heartbeat: (svc.heartbeat_out_ms, svc.heartbeat_in_ms),
            reconnect: svc.reconnect,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckMode {
    Auto,
    ClientIndividual,
}

impl AckMode {
    pub fn header_value(self) -> &'static str {
        match self {
            AckMode::Auto => "auto",
            AckMode::ClientIndividual => "client-individual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriptionId(pub u64);

impl fmt::Display for SubscriptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One received message as handed to a subscription handler.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub subscription: SubscriptionId,
    pub envelope: MessageEnvelope,
    pub redelivered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HandlerError {
    /// NACKed in client-individual mode.
    #[error("handler failed: {0}")]
    Failed(String),
    /// Neither ACK nor NACK. The message stays with the subscription until
    /// it is unsubscribed or the session ends; the broker then requeues it.
    #[error("message left unacknowledged")]
    Deferred,
}

impl HandlerError {
    pub fn failed(reason: impl Into<String>) -> Self {
        HandlerError::Failed(reason.into())
    }
}

/// Message callback. Runs on the session's reader context, serially and in
/// arrival order; the result decides ACK, NACK or neither in
/// client-individual mode. Handlers must not block for long and must not call back into the
/// owning session's `disconnect`.
pub type MessageHandler = Arc<dyn Fn(&Delivery) -> Result<(), HandlerError> + Send + Sync>;

#[derive(Clone)]
pub struct SubscriptionSpec {
    pub wire_path: String,
    pub ack_mode: AckMode,
    pub handler: MessageHandler,
}

impl SubscriptionSpec {
    pub fn new(
        wire_path: impl Into<String>,
        ack_mode: AckMode,
        handler: impl Fn(&Delivery) -> Result<(), HandlerError> + Send + Sync + 'static,
    ) -> Self {
        SubscriptionSpec {
            wire_path: wire_path.into(),
            ack_mode,
            handler: Arc::new(handler),
        }
    }

    pub fn is_valid_path(&self) -> bool {
        self.wire_path.starts_with("/queue/") || self.wire_path.starts_with("/topic/")
    }
}

impl fmt::Debug for SubscriptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubscriptionSpec")
            .field("wire_path", &self.wire_path)
            .field("ack_mode", &self.ack_mode)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisconnectReason {
    PeerClose,
    HeartbeatTimeout,
    ProtocolError,
    Requested,
}

impl fmt::Display for DisconnectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisconnectReason::PeerClose => "peer-close",
            DisconnectReason::HeartbeatTimeout => "heartbeat-timeout",
            DisconnectReason::ProtocolError => "protocol-error",
            DisconnectReason::Requested => "requested",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConnectorEvent {
    Connected,
    Disconnected(DisconnectReason),
    MessageArrived(SubscriptionId, MessageEnvelope),
    ReceiptConfirmed(String),
    ProtocolError(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConnectError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("TLS handshake failed: {0}")]
    TlsHandshakeFailed(String),
    #[error("connect timed out")]
    Timeout,
    #[error("protocol error during handshake: {0}")]
    Protocol(String),
    #[error("invalid connector configuration: {0}")]
    Config(String),
    #[error("no connector registered for protocol {0:?}")]
    UnknownProtocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendFailure {
    Timeout,
    Io(String),
}

impl fmt::Display for SendFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SendFailure::Timeout => f.write_str("receipt timeout"),
            SendFailure::Io(e) => write!(f, "i/o: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("session is not connected")]
    NotConnected,
    #[error("send failed: {0}")]
    SendFailed(SendFailure),
    #[error("invalid subscription path {0:?}")]
    InvalidPath(String),
}

/// A live (or formerly live) protocol session.
#[async_trait]
pub trait Session: Send + Sync {
    fn is_connected(&self) -> bool;

    fn heartbeat_plan(&self) -> HeartbeatPlan;

    fn events(&self) -> broadcast::Receiver<ConnectorEvent>;

    /// Sends one envelope. With `confirm`, completes only once the broker
    /// has acknowledged it with a receipt.
    async fn put(&self, wire_path: &str, env: &MessageEnvelope, confirm: bool) -> Result<(), SessionError>;

    /// Sends all items in order, each receipt-confirmed; completes when every
    /// receipt has arrived.
    async fn put_batch(&self, items: &[(String, MessageEnvelope)]) -> Result<(), SessionError>;

    async fn subscribe(&self, spec: SubscriptionSpec) -> Result<SubscriptionId, SessionError>;

    async fn unsubscribe(&self, id: SubscriptionId) -> Result<(), SessionError>;

    /// Graceful, idempotent shutdown.
    async fn disconnect(&self);
}

#[async_trait]
pub trait Connector: Send + Sync {
    async fn connect(&self, params: &ConnectorParams) -> Result<Arc<dyn Session>, ConnectError>;
}

/// Maps protocol names (`MQType`) to connectors.
#[derive(Clone)]
pub struct ConnectorRegistry {
    connectors: HashMap<String, Arc<dyn Connector>>,
}

impl ConnectorRegistry {
    pub fn empty() -> Self {
        ConnectorRegistry {
            connectors: HashMap::new(),
        }
    }

    pub fn register(&mut self, protocol: impl Into<String>, connector: Arc<dyn Connector>) {
        self.connectors.insert(protocol.into(), connector);
    }

    pub fn get(&self, protocol: &str) -> Result<Arc<dyn Connector>, ConnectError> {
        self.connectors
            .get(protocol)
            .cloned()
            .ok_or_else(|| ConnectError::UnknownProtocol(protocol.to_string()))
    }

    pub fn protocols(&self) -> Vec<&str> {
        self.connectors.keys().map(String::as_str).collect()
    }
}

impl Default for ConnectorRegistry {
    /// `stomp` plus a process-wide `loopback` hub.
    fn default() -> Self {
        let mut reg = ConnectorRegistry::empty();
        reg.register("stomp", Arc::new(StompConnector));
        reg.register("loopback", Arc::new(LoopbackConnector::new(LoopbackHub::new())));
        reg
    }
}
