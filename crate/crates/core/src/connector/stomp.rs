//! STOMP 1.2 connector over TCP or TLS.
//!
//! Each session runs one reader task (frame dispatch, handler invocation,
//! heart-beat watchdog) and one writer task (serialized socket writes and
//! outgoing heart-beats).

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::{SinkExt, StreamExt};
use parking_lot::Mutex;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpStream;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio_rustls::TlsConnector;
use tokio_util::codec::{FramedRead, FramedWrite};
use tokio_util::sync::CancellationToken;
use tracing::{debug, warn};

use super::tls::{client_config, server_name, wants_tls};
use super::{
    AckMode, ConnectError, Connector, ConnectorEvent, ConnectorParams, Delivery,
    DisconnectReason, SendFailure, Session, SessionError, SubscriptionId, SubscriptionSpec,
    DISCONNECT_RECEIPT_TIMEOUT, RECEIPT_TIMEOUT,
};
use crate::config::AuthMode;
use crate::message::{decode_message, MessageEnvelope, HEADER_DESTINATION};
use crate::stomp::{
    negotiate_heartbeat, parse_heartbeat_header, CodecError, Command, Frame, HeartbeatPlan,
    StompCodec,
};

const EVENT_CAPACITY: usize = 1024;

trait IoStream: AsyncRead + AsyncWrite + Send + Unpin {}
impl<T: AsyncRead + AsyncWrite + Send + Unpin> IoStream for T {}

type Reader = FramedRead<tokio::io::ReadHalf<Box<dyn IoStream>>, StompCodec>;
type Writer = FramedWrite<tokio::io::WriteHalf<Box<dyn IoStream>>, StompCodec>;

#[derive(Debug, Default, Clone, Copy)]
pub struct StompConnector;

#[async_trait]
impl Connector for StompConnector {
    async fn connect(&self, params: &ConnectorParams) -> Result<Arc<dyn Session>, ConnectError> {
        let session: Arc<dyn Session> = StompSession::connect(params).await?;
        Ok(session)
    }
}

struct Outbound {
    frame: Frame,
    written: Option<oneshot::Sender<Result<(), String>>>,
}

struct Shared {
    out: mpsc::UnboundedSender<Outbound>,
    connected: AtomicBool,
    terminated: AtomicBool,
    closing: AtomicBool,
    events: broadcast::Sender<ConnectorEvent>,
    receipts: Mutex<HashMap<String, oneshot::Sender<()>>>,
    subscriptions: Mutex<HashMap<u64, SubscriptionSpec>>,
    next_subscription: AtomicU64,
    next_receipt: AtomicU64,
    plan: HeartbeatPlan,
    stop: CancellationToken,
}

pub struct StompSession {
    shared: Arc<Shared>,
}

impl StompSession {
    pub async fn connect(params: &ConnectorParams) -> Result<Arc<StompSession>, ConnectError> {
        tokio::time::timeout(params.connect_timeout, Self::open(params))
            .await
            .map_err(|_| ConnectError::Timeout)?
    }

    async fn open(params: &ConnectorParams) -> Result<Arc<StompSession>, ConnectError> {
        let tcp = TcpStream::connect((params.host.as_str(), params.port))
            .await
            .map_err(|e| ConnectError::ConnectionRefused(format!("{}:{}: {e}", params.host, params.port)))?;
        let _ = tcp.set_nodelay(true);
        let tls = wants_tls(params);
        let stream: Box<dyn IoStream> = if tls {
            let connector = TlsConnector::from(client_config(params)?);
            let stream = connector
                .connect(server_name(&params.host)?, tcp)
                .await
                .map_err(|e| ConnectError::TlsHandshakeFailed(e.to_string()))?;
            Box::new(stream)
        } else {
            Box::new(tcp)
        };
        let (r, w) = tokio::io::split(stream);
        let mut reader: Reader = FramedRead::new(r, StompCodec::default());
        let mut writer: Writer = FramedWrite::new(w, StompCodec::default());

        let (cx, cy) = params.heartbeat;
        let mut connect = Frame::new(Command::Connect)
            .header("accept-version", "1.2")
            .header("host", params.virtual_host.as_str())
            .header("heart-beat", format!("{cx},{cy}"));
        if params.auth.mode == AuthMode::UserPass {
            let password = params
                .auth
                .resolve_password()
                .map_err(|e| ConnectError::Config(e.to_string()))?;
            connect = connect
                .header("login", params.auth.user.clone().unwrap_or_default())
                .header("passcode", password);
        }
        writer
            .send(connect)
            .await
            .map_err(|e| handshake_error(e, tls))?;

        let reply = loop {
            match reader.next().await {
                Some(Ok(frame)) if frame.is_heartbeat() => continue,
                Some(Ok(frame)) => break frame,
                Some(Err(e)) => return Err(handshake_error(e, tls)),
                None if tls => {
                    return Err(ConnectError::TlsHandshakeFailed(
                        "connection closed during handshake".into(),
                    ))
                }
                None => {
                    return Err(ConnectError::ConnectionRefused(
                        "connection closed during handshake".into(),
                    ))
                }
            }
        };
        match reply.command {
            Command::Connected => {}
            Command::Error => return Err(ConnectError::AuthFailed(error_text(&reply))),
            other => return Err(ConnectError::Protocol(format!("expected CONNECTED, got {other}"))),
        }
        if let Some(version) = reply.get("version") {
            if version != "1.2" {
                return Err(ConnectError::Protocol(format!("unsupported version {version}")));
            }
        }
        let server_hb = reply
            .get("heart-beat")
            .and_then(parse_heartbeat_header)
            .unwrap_or((0, 0));
        let plan = negotiate_heartbeat((cx, cy), server_hb);
        debug!(host = %params.host, port = params.port, ?plan, "stomp session connected");

        let (out, rx) = mpsc::unbounded_channel();
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        let shared = Arc::new(Shared {
            out,
            connected: AtomicBool::new(true),
            terminated: AtomicBool::new(false),
            closing: AtomicBool::new(false),
            events,
            receipts: Mutex::new(HashMap::new()),
            subscriptions: Mutex::new(HashMap::new()),
            next_subscription: AtomicU64::new(1),
            next_receipt: AtomicU64::new(1),
            plan,
            stop: CancellationToken::new(),
        });
        tokio::spawn(writer_loop(writer, rx, Arc::clone(&shared)));
        tokio::spawn(reader_loop(reader, Arc::clone(&shared)));
        let _ = shared.events.send(ConnectorEvent::Connected);
        Ok(Arc::new(StompSession { shared }))
    }
}

fn handshake_error(e: CodecError, tls: bool) -> ConnectError {
    match e {
        CodecError::Tls(msg) => ConnectError::TlsHandshakeFailed(msg),
        CodecError::Io(msg) if tls => ConnectError::TlsHandshakeFailed(msg),
        CodecError::Io(msg) => ConnectError::ConnectionRefused(msg),
        other => ConnectError::Protocol(other.to_string()),
    }
}

fn error_text(frame: &Frame) -> String {
    let body = String::from_utf8_lossy(&frame.body);
    match (frame.get("message"), body.trim()) {
        (Some(m), "") => m.to_string(),
        (Some(m), b) => format!("{m}: {b}"),
        (None, b) => b.to_string(),
    }
}

fn send_frame(wire_path: &str, env: &MessageEnvelope) -> Frame {
    let mut frame = Frame::new(Command::Send)
        .header("destination", wire_path)
        .header("content-type", "application/json");
    for (k, v) in env.headers() {
        if k != HEADER_DESTINATION {
            frame.headers.push((k, v));
        }
    }
    frame.body = crate::message::canonical_json(&env.payload);
    frame
}

impl Shared {
    fn terminate(&self, reason: DisconnectReason) {
        if self.terminated.swap(true, Ordering::SeqCst) {
            return;
        }
        self.connected.store(false, Ordering::SeqCst);
        self.receipts.lock().clear();
        self.subscriptions.lock().clear();
        self.stop.cancel();
        debug!(%reason, "stomp session terminated");
        let _ = self.events.send(ConnectorEvent::Disconnected(reason));
    }

    fn enqueue(&self, frame: Frame) -> Result<(), SessionError> {
        self.out
            .send(Outbound { frame, written: None })
            .map_err(|_| SessionError::NotConnected)
    }

    /// Queues a frame and waits until it has been written to the socket.
    async fn write(&self, frame: Frame) -> Result<(), SessionError> {
        let (tx, rx) = oneshot::channel();
        self.out
            .send(Outbound {
                frame,
                written: Some(tx),
            })
            .map_err(|_| SessionError::NotConnected)?;
        match rx.await {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(SessionError::SendFailed(SendFailure::Io(e))),
            Err(_) => Err(SessionError::SendFailed(SendFailure::Io("connection closed".into()))),
        }
    }

    /// Writes `frame` with a receipt request and waits for the receipt.
    async fn write_confirmed(&self, mut frame: Frame) -> Result<(), SessionError> {
        let (id, rx) = self.register_receipt()?;
        frame.headers.push(("receipt".into(), id.clone()));
        if let Err(e) = self.write(frame).await {
            self.receipts.lock().remove(&id);
            return Err(e);
        }
        match tokio::time::timeout(RECEIPT_TIMEOUT, rx).await {
            Ok(Ok(())) => Ok(()),
            Ok(Err(_)) => Err(SessionError::SendFailed(SendFailure::Io(
                "connection lost before receipt".into(),
            ))),
            Err(_) => {
                self.receipts.lock().remove(&id);
                Err(SessionError::SendFailed(SendFailure::Timeout))
            }
        }
    }

    fn register_receipt(&self) -> Result<(String, oneshot::Receiver<()>), SessionError> {
        let id = format!("r-{}", self.next_receipt.fetch_add(1, Ordering::Relaxed));
        let (tx, rx) = oneshot::channel();
        self.receipts.lock().insert(id.clone(), tx);
        if self.terminated.load(Ordering::SeqCst) {
            self.receipts.lock().remove(&id);
            return Err(SessionError::NotConnected);
        }
        Ok((id, rx))
    }

    fn handle_frame(&self, frame: Frame) {
        match frame.command {
            Command::Message => self.handle_message(frame),
            Command::Receipt => {
                if let Some(id) = frame.get("receipt-id") {
                    if let Some(tx) = self.receipts.lock().remove(id) {
                        let _ = tx.send(());
                    }
                    if self.events.receiver_count() > 0 {
                        let _ = self
                            .events
                            .send(ConnectorEvent::ReceiptConfirmed(id.to_string()));
                    }
                }
            }
            Command::Error => {
                let text = error_text(&frame);
                warn!(error = %text, "broker sent ERROR");
                let _ = self.events.send(ConnectorEvent::ProtocolError(text));
                self.terminate(DisconnectReason::ProtocolError);
            }
            _ => {}
        }
    }

    fn handle_message(&self, frame: Frame) {
        let Some(sub_id) = frame.get("subscription").and_then(|s| s.parse::<u64>().ok()) else {
            warn!("MESSAGE without a known subscription header");
            return;
        };
        let Some(spec) = self.subscriptions.lock().get(&sub_id).cloned() else {
            // late delivery for a dropped subscription
            return;
        };
        let ack_id = frame.get("ack").map(str::to_string);
        let headers = frame.headers.iter().map(|(k, v)| (k.as_str(), v.as_str()));
        let outcome = match decode_message(&frame.body, headers) {
            Ok(decoded) => {
                let delivery = Delivery {
                    subscription: SubscriptionId(sub_id),
                    envelope: decoded.envelope,
                    redelivered: frame.get("redelivered") == Some("true"),
                };
                if self.events.receiver_count() > 0 {
                    let _ = self.events.send(ConnectorEvent::MessageArrived(
                        delivery.subscription,
                        delivery.envelope.clone(),
                    ));
                }
                (spec.handler)(&delivery)
            }
            Err(e) => {
                warn!(error = %e, "discarding undecodable message");
                Err(super::HandlerError::failed(e.to_string()))
            }
        };
        if spec.ack_mode == AckMode::ClientIndividual {
            let Some(ack_id) = ack_id else {
                warn!("client-individual MESSAGE without ack header");
                return;
            };
            let command = match outcome {
                Ok(()) => Command::Ack,
                Err(super::HandlerError::Deferred) => return,
                Err(super::HandlerError::Failed(_)) => Command::Nack,
            };
            let _ = self.enqueue(Frame::new(command).header("id", ack_id));
        }
    }
}

async fn writer_loop(mut writer: Writer, mut rx: mpsc::UnboundedReceiver<Outbound>, shared: Arc<Shared>) {
    let send_every = shared.plan.send_interval_ms;
    let mut ticker = (send_every > 0).then(|| {
        let period = Duration::from_millis(send_every);
        tokio::time::interval_at(tokio::time::Instant::now() + period, period)
    });
    loop {
        let tick = async {
            match ticker.as_mut() {
                Some(t) => {
                    t.tick().await;
                }
                None => std::future::pending::<()>().await,
            }
        };
        tokio::select! {
            biased;
            msg = rx.recv() => {
                let Some(Outbound { frame, written }) = msg else { break };
                let result = writer.send(frame).await;
                let failed_io = matches!(result, Err(CodecError::Io(_) | CodecError::Tls(_)));
                if let Some(done) = written {
                    let _ = done.send(result.map_err(|e| e.to_string()));
                }
                if failed_io {
                    shared.terminate(DisconnectReason::PeerClose);
                    break;
                }
            }
            _ = tick => {
                if writer.send(Frame::heartbeat()).await.is_err() {
                    shared.terminate(DisconnectReason::PeerClose);
                    break;
                }
            }
            _ = shared.stop.cancelled() => break,
        }
    }
    // drain frames queued before the stop (e.g. a final ACK), then close
    while let Ok(Outbound { frame, written }) = rx.try_recv() {
        let result = writer.send(frame).await;
        if let Some(done) = written {
            let _ = done.send(result.map_err(|e| e.to_string()));
        }
    }
    let _ = writer.close().await;
}

async fn reader_loop(mut reader: Reader, shared: Arc<Shared>) {
    let window = match shared.plan.recv_timeout_ms {
        0 => None,
        base => Some(Duration::from_millis(base * 2)),
    };
    loop {
        let next = async {
            match window {
                Some(w) => tokio::time::timeout(w, reader.next()).await.ok(),
                None => Some(reader.next().await),
            }
        };
        let item = tokio::select! {
            _ = shared.stop.cancelled() => break,
            item = next => item,
        };
        match item {
            None => {
                shared.terminate(DisconnectReason::HeartbeatTimeout);
                break;
            }
            Some(None) => {
                let reason = if shared.closing.load(Ordering::SeqCst) {
                    DisconnectReason::Requested
                } else {
                    DisconnectReason::PeerClose
                };
                shared.terminate(reason);
                break;
            }
            Some(Some(Err(e))) => {
                let reason = match e {
                    CodecError::Io(_) | CodecError::Tls(_) if shared.closing.load(Ordering::SeqCst) => {
                        DisconnectReason::Requested
                    }
                    CodecError::Io(_) | CodecError::Tls(_) => DisconnectReason::PeerClose,
                    other => {
                        let _ = shared.events.send(ConnectorEvent::ProtocolError(other.to_string()));
                        DisconnectReason::ProtocolError
                    }
                };
                shared.terminate(reason);
                break;
            }
            Some(Some(Ok(frame))) => shared.handle_frame(frame),
        }
    }
}

#[async_trait]
impl Session for StompSession {
    fn is_connected(&self) -> bool {
        self.shared.connected.load(Ordering::SeqCst)
    }

    fn heartbeat_plan(&self) -> HeartbeatPlan {
        self.shared.plan
    }

    fn events(&self) -> broadcast::Receiver<ConnectorEvent> {
        self.shared.events.subscribe()
    }

    async fn put(&self, wire_path: &str, env: &MessageEnvelope, confirm: bool) -> Result<(), SessionError> {
        if !self.is_connected() {
            return Err(SessionError::NotConnected);
        }
        let frame = send_frame(wire_path, env);
        if !confirm {
            return self.shared.write(frame).await;
        }
        self.shared.write_confirmed(frame).await
    }

    async fn put_batch(&self, items: &[(String, MessageEnvelope)]) -> Result<(), SessionError> {
        if !self.is_connected() {
            return Err(SessionError::NotConnected);
        }
        let mut pending = Vec::with_capacity(items.len());
        for (path, env) in items {
            let (id, rx) = self.shared.register_receipt()?;
            let mut frame = send_frame(path, env);
            frame.headers.push(("receipt".into(), id.clone()));
            self.shared.enqueue(frame)?;
            pending.push((id, rx));
        }
        let ids: Vec<String> = pending.iter().map(|(id, _)| id.clone()).collect();
        let all = futures::future::try_join_all(pending.into_iter().map(|(_, rx)| rx));
        match tokio::time::timeout(RECEIPT_TIMEOUT, all).await {
            Ok(Ok(_)) => Ok(()),
            Ok(Err(_)) => Err(SessionError::SendFailed(SendFailure::Io(
                "connection lost before receipt".into(),
            ))),
            Err(_) => {
                let mut receipts = self.shared.receipts.lock();
                for id in ids {
                    receipts.remove(&id);
                }
                Err(SessionError::SendFailed(SendFailure::Timeout))
            }
        }
    }

    async fn subscribe(&self, spec: SubscriptionSpec) -> Result<SubscriptionId, SessionError> {
        if !spec.is_valid_path() {
            return Err(SessionError::InvalidPath(spec.wire_path));
        }
        if !self.is_connected() {
            return Err(SessionError::NotConnected);
        }
        let id = self.shared.next_subscription.fetch_add(1, Ordering::Relaxed);
        let frame = Frame::new(Command::Subscribe)
            .header("id", id.to_string())
            .header("destination", spec.wire_path.as_str())
            .header("ack", spec.ack_mode.header_value());
        self.shared.subscriptions.lock().insert(id, spec);
        if let Err(e) = self.shared.write_confirmed(frame).await {
            self.shared.subscriptions.lock().remove(&id);
            return Err(e);
        }
        Ok(SubscriptionId(id))
    }

    async fn unsubscribe(&self, id: SubscriptionId) -> Result<(), SessionError> {
        self.shared.subscriptions.lock().remove(&id.0);
        if !self.is_connected() {
            return Err(SessionError::NotConnected);
        }
        self.shared
            .write(Frame::new(Command::Unsubscribe).header("id", id.to_string()))
            .await
    }

    async fn disconnect(&self) {
        let shared = &self.shared;
        if shared.terminated.load(Ordering::SeqCst) || shared.closing.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Ok((id, rx)) = shared.register_receipt() {
            if shared
                .enqueue(Frame::new(Command::Disconnect).header("receipt", id))
                .is_ok()
            {
                let _ = tokio::time::timeout(DISCONNECT_RECEIPT_TIMEOUT, rx).await;
            }
        }
        shared.terminate(DisconnectReason::Requested);
    }
}

impl Drop for StompSession {
    fn drop(&mut self) {
        self.shared.stop.cancel();
    }
}
