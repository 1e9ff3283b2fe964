//! Reconnect supervision: exponential backoff with jitter, and replay of
//! active subscriptions on every new underlying session.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::future::BoxFuture;
use parking_lot::RwLock;
use rand::Rng;
use tokio::sync::broadcast;
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use super::{
    ConnectError, ConnectorEvent, DisconnectReason, Session, SessionError, SubscriptionId,
    SubscriptionSpec,
};
use crate::config::ReconnectPolicy;
use crate::message::MessageEnvelope;
use crate::stomp::HeartbeatPlan;

/// Produces fresh underlying sessions.
pub type SessionFactory =
    Arc<dyn Fn() -> BoxFuture<'static, Result<Arc<dyn Session>, ConnectError>> + Send + Sync>;

/// Backoff delays: `initial * multiplier^n`, capped at `max`, then scaled by
/// a uniform factor in [0.5, 1.5] when jitter is on.
#[derive(Debug, Clone)]
pub struct Backoff {
    policy: ReconnectPolicy,
    jitter: bool,
    attempt: u32,
}

impl Backoff {
    pub fn new(policy: ReconnectPolicy, jitter: bool) -> Self {
        Backoff {
            policy,
            jitter,
            attempt: 0,
        }
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }

    /// Un-jittered delay for the current attempt.
    pub fn base_delay_ms(&self) -> u64 {
        let raw = self.policy.initial_backoff_ms as f64
            * self.policy.multiplier.max(1.0).powi(self.attempt.min(64) as i32);
        raw.min(self.policy.max_backoff_ms as f64) as u64
    }

    pub fn next_delay(&mut self) -> Duration {
        let base = self.base_delay_ms();
        self.attempt = self.attempt.saturating_add(1);
        let ms = if self.jitter {
            (base as f64 * rand::thread_rng().gen_range(0.5..=1.5)) as u64
        } else {
            base
        };
        Duration::from_millis(ms)
    }
}

struct ActiveSubscription {
    spec: SubscriptionSpec,
    inner_id: Option<SubscriptionId>,
}

struct State {
    current: RwLock<Option<Arc<dyn Session>>>,
    subscriptions: tokio::sync::Mutex<BTreeMap<u64, ActiveSubscription>>,
    next_id: AtomicU64,
    events: broadcast::Sender<ConnectorEvent>,
    stop: CancellationToken,
    stopped: AtomicBool,
    reconnects: AtomicU64,
}

/// A session that survives broker restarts. Puts made while the underlying
/// session is down fail with `NotConnected`.
pub struct SupervisedSession {
    state: Arc<State>,
}

/// Connects once (errors propagate), then supervises: every unsolicited
/// disconnect triggers backoff and reconnect, after which all active
/// subscriptions are re-issued.
pub async fn run_reconnect_loop(
    factory: SessionFactory,
    policy: ReconnectPolicy,
    jitter: bool,
) -> Result<Arc<SupervisedSession>, ConnectError> {
    let first = factory().await?;
    let (events, _) = broadcast::channel(1024);
    let state = Arc::new(State {
        current: RwLock::new(Some(Arc::clone(&first))),
        subscriptions: tokio::sync::Mutex::new(BTreeMap::new()),
        next_id: AtomicU64::new(1),
        events,
        stop: CancellationToken::new(),
        stopped: AtomicBool::new(false),
        reconnects: AtomicU64::new(0),
    });
    tokio::spawn(supervise(Arc::clone(&state), factory, Backoff::new(policy, jitter), first));
    Ok(Arc::new(SupervisedSession { state }))
}

async fn supervise(state: Arc<State>, factory: SessionFactory, mut backoff: Backoff, mut session: Arc<dyn Session>) {
    loop {
        let reason = watch_session(&state, &session).await;
        *state.current.write() = None;
        if state.stop.is_cancelled() {
            return;
        }
        warn!(%reason, "session lost, reconnecting");
        backoff.reset();
        session = loop {
            let delay = backoff.next_delay();
            tokio::select! {
                _ = state.stop.cancelled() => return,
                _ = tokio::time::sleep(delay) => {}
            }
            match factory().await {
                Ok(s) => break s,
                Err(e) => warn!(error = %e, "reconnect attempt failed"),
            }
        };
        // resubscribe before publishing the new session
        {
            let mut subs = state.subscriptions.lock().await;
            for active in subs.values_mut() {
                active.inner_id = match session.subscribe(active.spec.clone()).await {
                    Ok(id) => Some(id),
                    Err(e) => {
                        warn!(error = %e, path = %active.spec.wire_path, "resubscribe failed");
                        None
                    }
                };
            }
            if state.stop.is_cancelled() {
                session.disconnect().await;
                return;
            }
            *state.current.write() = Some(Arc::clone(&session));
        }
        state.reconnects.fetch_add(1, Ordering::SeqCst);
        info!("session re-established");
        let _ = state.events.send(ConnectorEvent::Connected);
    }
}

/// Forwards events from `session` until it disconnects; returns the reason.
async fn watch_session(state: &State, session: &Arc<dyn Session>) -> DisconnectReason {
    let mut rx = session.events();
    if !session.is_connected() {
        return DisconnectReason::PeerClose;
    }
    loop {
        let event = tokio::select! {
            ev = rx.recv() => ev,
            _ = state.stop.cancelled() => {
                // disconnect() drives the requested close; keep forwarding its event
                match tokio::time::timeout(Duration::from_secs(3), rx.recv()).await {
                    Ok(ev) => ev,
                    Err(_) => return DisconnectReason::Requested,
                }
            }
        };
        match event {
            Ok(ConnectorEvent::Connected) => {}
            Ok(ConnectorEvent::Disconnected(reason)) => {
                let _ = state.events.send(ConnectorEvent::Disconnected(reason));
                return reason;
            }
            Ok(other) => {
                let _ = state.events.send(other);
            }
            Err(broadcast::error::RecvError::Lagged(_)) => {}
            Err(broadcast::error::RecvError::Closed) => return DisconnectReason::PeerClose,
        }
    }
}

impl SupervisedSession {
    /// Number of successful reconnects so far.
    pub fn reconnect_count(&self) -> u64 {
        self.state.reconnects.load(Ordering::SeqCst)
    }

    pub async fn stop(&self) {
        self.disconnect().await;
    }

    /// Wire paths of the subscriptions that will be restored on reconnect.
    pub async fn active_subscriptions(&self) -> Vec<String> {
        self.state
            .subscriptions
            .lock()
            .await
            .values()
            .map(|a| a.spec.wire_path.clone())
            .collect()
    }

    fn current(&self) -> Option<Arc<dyn Session>> {
        self.state.current.read().clone()
    }
}

#[async_trait]
impl Session for SupervisedSession {
    fn is_connected(&self) -> bool {
        self.current().is_some_and(|s| s.is_connected())
    }

    fn heartbeat_plan(&self) -> HeartbeatPlan {
        self.current().map(|s| s.heartbeat_plan()).unwrap_or_default()
    }

    fn events(&self) -> broadcast::Receiver<ConnectorEvent> {
        self.state.events.subscribe()
    }

    async fn put(&self, wire_path: &str, env: &MessageEnvelope, confirm: bool) -> Result<(), SessionError> {
        match self.current() {
            Some(s) => s.put(wire_path, env, confirm).await,
            None => Err(SessionError::NotConnected),
        }
    }

    async fn put_batch(&self, items: &[(String, MessageEnvelope)]) -> Result<(), SessionError> {
        match self.current() {
            Some(s) => s.put_batch(items).await,
            None => Err(SessionError::NotConnected),
        }
    }

    async fn subscribe(&self, spec: SubscriptionSpec) -> Result<SubscriptionId, SessionError> {
        if !spec.is_valid_path() {
            return Err(SessionError::InvalidPath(spec.wire_path));
        }
        let mut subs = self.state.subscriptions.lock().await;
        let inner_id = match self.current() {
            Some(s) => Some(s.subscribe(spec.clone()).await?),
            None => None,
        };
        let id = self.state.next_id.fetch_add(1, Ordering::SeqCst);
        subs.insert(id, ActiveSubscription { spec, inner_id });
        Ok(SubscriptionId(id))
    }

    async fn unsubscribe(&self, id: SubscriptionId) -> Result<(), SessionError> {
        let removed = self.state.subscriptions.lock().await.remove(&id.0);
        if let (Some(ActiveSubscription { inner_id: Some(inner), .. }), Some(s)) = (removed, self.current()) {
            if s.is_connected() {
                return s.unsubscribe(inner).await;
            }
        }
        Ok(())
    }

    async fn disconnect(&self) {
        if self.state.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.state.stop.cancel();
        let current = self.state.current.write().take();
        if let Some(s) = current {
            s.disconnect().await;
        }
        self.state.subscriptions.lock().await.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_without_jitter_doubles_to_cap() {
        let mut b = Backoff::new(
            ReconnectPolicy {
                initial_backoff_ms: 500,
                max_backoff_ms: 30_000,
                multiplier: 2.0,
            },
            false,
        );
        let seq: Vec<u64> = (0..10).map(|_| b.next_delay().as_millis() as u64).collect();
        assert_eq!(seq, vec![500, 1000, 2000, 4000, 8000, 16000, 30000, 30000, 30000, 30000]);
        b.reset();
        assert_eq!(b.next_delay(), Duration::from_millis(500));
    }

    #[test]
    fn jitter_stays_within_half_band() {
        let policy = ReconnectPolicy {
            initial_backoff_ms: 1000,
            max_backoff_ms: 1000,
            multiplier: 1.0,
        };
        let mut b = Backoff::new(policy, true);
        for _ in 0..200 {
            let d = b.next_delay().as_millis() as u64;
            assert!((500..=1500).contains(&d), "{d}");
        }
    }
}
