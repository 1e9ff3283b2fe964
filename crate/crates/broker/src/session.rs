use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use mqware::stomp::{negotiate_heartbeat, parse_heartbeat_header, CodecError, Command, Frame, StompCodec};
use serde_json::json;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::sync::{mpsc, oneshot};
use tokio_util::codec::{FramedRead, FramedWrite};
use tracing::debug;

use crate::core::{AckKind, CoreMsg, Outbound};
use crate::Shared;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

/// How a connection reached the broker.
pub(crate) struct Peer {
    pub addr: SocketAddr,
    pub tls: bool,
    /// Common name of a verified client certificate.
    pub cert_cn: Option<String>,
}

fn error(message: &str) -> Frame {
    Frame::new(Command::Error).header("message", message)
}

pub(crate) async fn run_session<S>(stream: S, peer: Peer, shared: Arc<Shared>)
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let (read_half, write_half) = tokio::io::split(stream);
    let codec = || StompCodec::new(shared.config.max_frame_size);
    let mut reader = FramedRead::new(read_half, codec());
    let mut writer = FramedWrite::new(write_half, codec());

    let connect = loop {
        let next = tokio::select! {
            _ = shared.stop.cancelled() => return,
            r = tokio::time::timeout(CONNECT_TIMEOUT, reader.next()) => r,
        };
        match next {
            Ok(Some(Ok(f))) if f.command == Command::Heartbeat => continue,
            Ok(Some(Ok(f))) => break f,
            Ok(Some(Err(e))) => {
                reject(&mut writer, &shared, &peer, "malformed frame", &e.to_string()).await;
                return;
            }
            Ok(None) | Err(_) => return,
        }
    };
    if !matches!(connect.command, Command::Connect | Command::Stomp) {
        reject(&mut writer, &shared, &peer, "expected CONNECT", connect.command.as_str()).await;
        return;
    }
    let versions = connect.get("accept-version").unwrap_or("1.0");
    if !versions.split(',').any(|v| v.trim() == "1.2") {
        reject(&mut writer, &shared, &peer, "version mismatch", versions).await;
        return;
    }
    let principal = match authenticate(&connect, &peer, &shared) {
        Some(p) => p,
        None => {
            reject(&mut writer, &shared, &peer, "authentication failed", connect.get("login").unwrap_or("")).await;
            return;
        }
    };
    let remote_hb = match connect.get("heart-beat") {
        None => (0, 0),
        Some(v) => match parse_heartbeat_header(v) {
            Some(hb) => hb,
            None => {
                reject(&mut writer, &shared, &peer, "malformed heart-beat", v).await;
                return;
            }
        },
    };
    let local_hb = (shared.config.heartbeat_out_ms, shared.config.heartbeat_in_ms);
    let plan = negotiate_heartbeat(local_hb, remote_hb);
    let session = shared.next_session.fetch_add(1, Ordering::SeqCst);
    let vhost = connect.get("host").unwrap_or("").to_string();

    let connected = Frame::new(Command::Connected)
        .header("version", "1.2")
        .header("heart-beat", format!("{},{}", local_hb.0, local_hb.1))
        .header("session", session.to_string())
        .header("server", concat!("mqware-broker/", env!("CARGO_PKG_VERSION")));
    let (tx, mut out_rx) = mpsc::unbounded_channel();
    if shared.core.send(CoreMsg::Open { session, tx }).is_err() {
        return;
    }
    if writer.send(connected).await.is_err() {
        close_session(&shared, session, "peer-close").await;
        return;
    }
    shared.log.record(
        "session_open",
        json!({"session": session, "principal": principal, "vhost": vhost, "peer": peer.addr.to_string(), "tls": peer.tls}),
    );

    let mut ticker = (plan.send_interval_ms > 0).then(|| {
        let period = Duration::from_millis(plan.send_interval_ms);
        tokio::time::interval_at(tokio::time::Instant::now() + period, period)
    });
    let window = (plan.recv_timeout_ms > 0).then(|| Duration::from_millis(plan.recv_timeout_ms * 2));

    let reason = loop {
        let tick = async {
            match ticker.as_mut() {
                Some(t) => {
                    t.tick().await;
                }
                None => std::future::pending::<()>().await,
            }
        };
        let read = async {
            match window {
                Some(w) => tokio::time::timeout(w, reader.next()).await.ok(),
                None => Some(reader.next().await),
            }
        };
        tokio::select! {
            biased;
            _ = shared.stop.cancelled() => break "broker-shutdown",
            out = out_rx.recv() => match out {
                Some(Outbound::Frame(f)) => {
                    if writer.send(f).await.is_err() {
                        break "peer-close";
                    }
                }
                Some(Outbound::Close) | None => {
                    let _ = writer.flush().await;
                    break "protocol-error";
                }
            },
            _ = tick => {
                if !shared.heartbeats_suppressed.load(Ordering::SeqCst)
                    && writer.send(Frame::new(Command::Heartbeat)).await.is_err()
                {
                    break "peer-close";
                }
            }
            frame = read => match frame {
                None => break "heartbeat-timeout",
                Some(None) => break "peer-close",
                Some(Some(Err(CodecError::Io(_)))) | Some(Some(Err(CodecError::Tls(_)))) => break "peer-close",
                Some(Some(Err(e))) => {
                    let _ = writer.send(error("malformed frame").body(e.to_string().into_bytes())).await;
                    break "protocol-error";
                }
                Some(Some(Ok(f))) => match handle_frame(f, session, &shared, &mut writer).await {
                    Flow::Continue => {}
                    Flow::Stop(reason) => break reason,
                    Flow::Disconnected => return,
                },
            },
        }
    };
    close_session(&shared, session, reason).await;
    let _ = writer.close().await;
}

enum Flow {
    Continue,
    Stop(&'static str),
    /// DISCONNECT already tore the session down.
    Disconnected,
}

async fn handle_frame<W>(frame: Frame, session: u64, shared: &Shared, writer: &mut W) -> Flow
where
    W: futures::Sink<Frame, Error = CodecError> + Unpin,
{
    let receipt = frame.get("receipt").map(str::to_string);
    let msg = match frame.command {
        Command::Heartbeat => return Flow::Continue,
        Command::Send => {
            let Some(destination) = frame.get("destination").map(str::to_string) else {
                let _ = writer.send(error("missing destination header")).await;
                return Flow::Stop("protocol-error");
            };
            if frame.get("transaction").is_some() {
                let _ = writer.send(error("transactions unsupported")).await;
                return Flow::Stop("protocol-error");
            }
            CoreMsg::Send {
                session,
                destination,
                headers: frame.headers,
                body: frame.body,
                receipt,
            }
        }
        Command::Subscribe => {
            let (Some(id), Some(destination)) = (frame.get("id"), frame.get("destination")) else {
                let _ = writer.send(error("SUBSCRIBE requires id and destination")).await;
                return Flow::Stop("protocol-error");
            };
            let Some(ack) = AckKind::parse(frame.get("ack")) else {
                let _ = writer.send(error("unsupported ack mode")).await;
                return Flow::Stop("protocol-error");
            };
            CoreMsg::Subscribe {
                session,
                id: id.to_string(),
                destination: destination.to_string(),
                ack,
                receipt,
            }
        }
        Command::Unsubscribe | Command::Ack | Command::Nack => {
            let Some(id) = frame.get("id").map(str::to_string) else {
                let _ = writer.send(error("missing id header")).await;
                return Flow::Stop("protocol-error");
            };
            match frame.command {
                Command::Unsubscribe => CoreMsg::Unsubscribe { session, id, receipt },
                Command::Ack => CoreMsg::Ack { session, id, receipt },
                _ => CoreMsg::Nack { session, id, receipt },
            }
        }
        Command::Begin | Command::Commit | Command::Abort => {
            let _ = writer.send(error("transactions unsupported")).await;
            return Flow::Stop("protocol-error");
        }
        Command::Disconnect => {
            close_session(shared, session, "requested").await;
            if let Some(id) = receipt {
                let _ = writer.send(Frame::new(Command::Receipt).header("receipt-id", id)).await;
            }
            let _ = writer.close().await;
            return Flow::Disconnected;
        }
        Command::Connect | Command::Stomp => {
            let _ = writer.send(error("already connected")).await;
            return Flow::Stop("protocol-error");
        }
        other => {
            let _ = writer.send(error("unexpected frame").body(other.as_str().as_bytes().to_vec())).await;
            return Flow::Stop("protocol-error");
        }
    };
    if shared.core.send(msg).is_err() {
        return Flow::Stop("broker-shutdown");
    }
    Flow::Continue
}

/// Returns the authenticated principal. A login is checked against the user
/// table; without one, a verified client certificate must be allow-listed.
fn authenticate(connect: &Frame, peer: &Peer, shared: &Shared) -> Option<String> {
    match connect.get("login") {
        Some(login) => {
            let expected = shared.passwords.get(login)?;
            let given = connect.get("passcode").unwrap_or("");
            constant_time_eq(expected.as_bytes(), given.as_bytes()).then(|| login.to_string())
        }
        None => {
            let cn = peer.cert_cn.as_ref()?;
            shared.config.cert_allow_list.contains(cn).then(|| format!("cn:{cn}"))
        }
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn reject<W>(writer: &mut W, shared: &Shared, peer: &Peer, message: &str, detail: &str)
where
    W: futures::Sink<Frame, Error = CodecError> + Unpin,
{
    debug!(peer = %peer.addr, message, "rejecting connection");
    shared.log.record(
        "connect_rejected",
        json!({"peer": peer.addr.to_string(), "reason": message, "tls": peer.tls}),
    );
    let _ = writer.send(error(message).body(detail.as_bytes().to_vec())).await;
    let _ = writer.close().await;
}

async fn close_session(shared: &Shared, session: u64, reason: &str) {
    let (tx, rx) = oneshot::channel();
    let requeued = if shared.core.send(CoreMsg::Close { session, reply: tx }).is_ok() {
        rx.await.unwrap_or(0)
    } else {
        0
    };
    shared.log.record(
        "session_close",
        json!({"session": session, "reason": reason, "requeued": requeued}),
    );
}
