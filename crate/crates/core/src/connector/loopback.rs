//! In-memory connector: an in-process hub with queue (round-robin) and topic
//! (fan-out) semantics. Registered as protocol `loopback`.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};

use async_trait::async_trait;
use parking_lot::Mutex;
use tokio::sync::{broadcast, mpsc};

use super::{
    AckMode, ConnectError, Connector, ConnectorEvent, ConnectorParams, Delivery,
    DisconnectReason, HandlerError, Session, SessionError, SubscriptionId, SubscriptionSpec,
};
use crate::message::MessageEnvelope;
use crate::stomp::HeartbeatPlan;

#[derive(Clone)]
struct Subscriber {
    session: u64,
    subscription: u64,
    tx: mpsc::UnboundedSender<(MessageEnvelope, bool)>,
}

#[derive(Default)]
struct QueueState {
    pending: VecDeque<(MessageEnvelope, bool)>,
    subscribers: Vec<Subscriber>,
    cursor: usize,
}

#[derive(Default)]
struct HubState {
    queues: HashMap<String, QueueState>,
    topics: HashMap<String, Vec<Subscriber>>,
    sessions: Vec<Weak<LoopbackInner>>,
}

/// Shared in-memory broker for all sessions of one [`LoopbackConnector`].
pub struct LoopbackHub {
    state: Mutex<HubState>,
    available: AtomicBool,
    next_session: AtomicU64,
    connects: AtomicUsize,
}

impl LoopbackHub {
    pub fn new() -> Arc<Self> {
        Arc::new(LoopbackHub {
            state: Mutex::new(HubState::default()),
            available: AtomicBool::new(true),
            next_session: AtomicU64::new(1),
            connects: AtomicUsize::new(0),
        })
    }

    /// Taking the hub down drops every session (peer-close) and refuses new
    /// connects until it is brought back up.
    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
        if !up {
            let sessions: Vec<_> = {
                let mut st = self.state.lock();
                st.queues.clear();
                st.topics.clear();
                std::mem::take(&mut st.sessions)
            };
            for s in sessions.iter().filter_map(Weak::upgrade) {
                s.terminate(DisconnectReason::PeerClose);
            }
        }
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    /// Number of currently open sessions.
    pub fn open_sessions(&self) -> usize {
        self.state
            .lock()
            .sessions
            .iter()
            .filter_map(Weak::upgrade)
            .filter(|s| s.connected.load(Ordering::SeqCst))
            .count()
    }

    /// Total successful connects since creation.
    pub fn connect_count(&self) -> usize {
        self.connects.load(Ordering::SeqCst)
    }

    pub fn queue_depth(&self, wire_path: &str) -> usize {
        self.state
            .lock()
            .queues
            .get(wire_path)
            .map_or(0, |q| q.pending.len())
    }

    fn route(&self, wire_path: &str, env: MessageEnvelope) {
        let mut st = self.state.lock();
        if wire_path.starts_with("/topic/") {
            if let Some(subs) = st.topics.get_mut(wire_path) {
                subs.retain(|s| s.tx.send((env.clone(), false)).is_ok());
            }
            return;
        }
        let q = st.queues.entry(wire_path.to_string()).or_default();
        q.pending.push_back((env, false));
        Self::dispatch(q);
    }

    fn requeue(&self, wire_path: &str, env: MessageEnvelope) {
        let mut st = self.state.lock();
        if let Some(q) = st.queues.get_mut(wire_path) {
            q.pending.push_front((env, true));
            Self::dispatch(q);
        }
    }

    fn dispatch(q: &mut QueueState) {
        while !q.subscribers.is_empty() {
            let Some(item) = q.pending.pop_front() else { break };
            let idx = q.cursor % q.subscribers.len();
            if q.subscribers[idx].tx.send(item.clone()).is_err() {
                q.subscribers.remove(idx);
                q.pending.push_front(item);
                continue;
            }
            q.cursor = (idx + 1) % q.subscribers.len();
        }
    }

    fn add_subscriber(&self, wire_path: &str, sub: Subscriber) {
        let mut st = self.state.lock();
        if wire_path.starts_with("/topic/") {
            st.topics.entry(wire_path.to_string()).or_default().push(sub);
        } else {
            let q = st.queues.entry(wire_path.to_string()).or_default();
            q.subscribers.push(sub);
            Self::dispatch(q);
        }
    }

    fn remove_subscriber(&self, session: u64, subscription: Option<u64>) {
        let matches = |s: &Subscriber| s.session == session && subscription.is_none_or(|id| s.subscription == id);
        let mut st = self.state.lock();
        for q in st.queues.values_mut() {
            q.subscribers.retain(|s| !matches(s));
            if q.cursor >= q.subscribers.len() {
                q.cursor = 0;
            }
        }
        for subs in st.topics.values_mut() {
            subs.retain(|s| !matches(s));
        }
    }
}

#[derive(Clone)]
pub struct LoopbackConnector {
    hub: Arc<LoopbackHub>,
}

impl LoopbackConnector {
    pub fn new(hub: Arc<LoopbackHub>) -> Self {
        LoopbackConnector { hub }
    }

    pub fn hub(&self) -> &Arc<LoopbackHub> {
        &self.hub
    }
}

#[async_trait]
impl Connector for LoopbackConnector {
    async fn connect(&self, _params: &ConnectorParams) -> Result<Arc<dyn Session>, ConnectError> {
        if !self.hub.is_available() {
            return Err(ConnectError::ConnectionRefused("loopback hub is down".into()));
        }
        let (events, _) = broadcast::channel(256);
        let inner = Arc::new(LoopbackInner {
            id: self.hub.next_session.fetch_add(1, Ordering::SeqCst),
            hub: Arc::downgrade(&self.hub),
            connected: AtomicBool::new(true),
            terminated: AtomicBool::new(false),
            events,
            next_subscription: AtomicU64::new(1),
            tasks: Mutex::new(HashMap::new()),
            held: Mutex::new(HashMap::new()),
        });
        self.hub.state.lock().sessions.push(Arc::downgrade(&inner));
        self.hub.connects.fetch_add(1, Ordering::SeqCst);
        let _ = inner.events.send(ConnectorEvent::Connected);
        Ok(Arc::new(LoopbackSession { inner }))
    }
}

struct LoopbackInner {
    id: u64,
    hub: Weak<LoopbackHub>,
    connected: AtomicBool,
    terminated: AtomicBool,
    events: broadcast::Sender<ConnectorEvent>,
    next_subscription: AtomicU64,
    tasks: Mutex<HashMap<u64, tokio::task::JoinHandle<()>>>,
    /// Deferred queue messages per subscription, requeued when it ends.
    held: Mutex<HashMap<u64, Vec<(String, MessageEnvelope)>>>,
}

impl LoopbackInner {
    fn release_held(&self, subscription: Option<u64>) {
        let released: Vec<(String, MessageEnvelope)> = {
            let mut held = self.held.lock();
            match subscription {
                Some(id) => held.remove(&id).unwrap_or_default(),
                None => held.drain().flat_map(|(_, v)| v).collect(),
            }
        };
        if let Some(hub) = self.hub.upgrade() {
            for (path, env) in released {
                hub.requeue(&path, env);
            }
        }
    }

    fn terminate(&self, reason: DisconnectReason) {
        if self.terminated.swap(true, Ordering::SeqCst) {
            return;
        }
        self.connected.store(false, Ordering::SeqCst);
        if let Some(hub) = self.hub.upgrade() {
            hub.remove_subscriber(self.id, None);
        }
        for (_, task) in self.tasks.lock().drain() {
            task.abort();
        }
        self.release_held(None);
        let _ = self.events.send(ConnectorEvent::Disconnected(reason));
    }
}

pub struct LoopbackSession {
    inner: Arc<LoopbackInner>,
}

#[async_trait]
impl Session for LoopbackSession {
    fn is_connected(&self) -> bool {
        self.inner.connected.load(Ordering::SeqCst)
    }

    fn heartbeat_plan(&self) -> HeartbeatPlan {
        HeartbeatPlan::default()
    }

    fn events(&self) -> broadcast::Receiver<ConnectorEvent> {
        self.inner.events.subscribe()
    }

    async fn put(&self, wire_path: &str, env: &MessageEnvelope, _confirm: bool) -> Result<(), SessionError> {
        let hub = self.inner.hub.upgrade().ok_or(SessionError::NotConnected)?;
        if !self.is_connected() {
            return Err(SessionError::NotConnected);
        }
        hub.route(wire_path, env.clone());
        Ok(())
    }

    async fn put_batch(&self, items: &[(String, MessageEnvelope)]) -> Result<(), SessionError> {
        for (path, env) in items {
            self.put(path, env, true).await?;
        }
        Ok(())
    }

    async fn subscribe(&self, spec: SubscriptionSpec) -> Result<SubscriptionId, SessionError> {
        if !spec.is_valid_path() {
            return Err(SessionError::InvalidPath(spec.wire_path));
        }
        let hub = self.inner.hub.upgrade().ok_or(SessionError::NotConnected)?;
        if !self.is_connected() {
            return Err(SessionError::NotConnected);
        }
        let id = self.inner.next_subscription.fetch_add(1, Ordering::SeqCst);
        let (tx, mut rx) = mpsc::unbounded_channel::<(MessageEnvelope, bool)>();
        let weak_hub = Arc::downgrade(&hub);
        let path = spec.wire_path.clone();
        let sub_path = path.clone();
        let is_queue = path.starts_with("/queue/");
        let inner = Arc::downgrade(&self.inner);
        let task = tokio::spawn(async move {
            while let Some((envelope, redelivered)) = rx.recv().await {
                let delivery = Delivery {
                    subscription: SubscriptionId(id),
                    envelope,
                    redelivered,
                };
                let outcome = (spec.handler)(&delivery);
                if !is_queue || spec.ack_mode != AckMode::ClientIndividual {
                    continue;
                }
                match outcome {
                    Ok(()) => {}
                    Err(HandlerError::Deferred) => {
                        if let Some(inner) = inner.upgrade() {
                            inner.held.lock().entry(id).or_default().push((path.clone(), delivery.envelope));
                        }
                    }
                    Err(HandlerError::Failed(_)) => {
                        if let Some(hub) = weak_hub.upgrade() {
                            hub.requeue(&path, delivery.envelope);
                        }
                    }
                }
            }
        });
        self.inner.tasks.lock().insert(id, task);
        hub.add_subscriber(
            &sub_path,
            Subscriber {
                session: self.inner.id,
                subscription: id,
                tx,
            },
        );
        Ok(SubscriptionId(id))
    }

    async fn unsubscribe(&self, id: SubscriptionId) -> Result<(), SessionError> {
        if let Some(hub) = self.inner.hub.upgrade() {
            hub.remove_subscriber(self.inner.id, Some(id.0));
        }
        if let Some(task) = self.inner.tasks.lock().remove(&id.0) {
            task.abort();
        }
        self.inner.release_held(Some(id.0));
        Ok(())
    }

    async fn disconnect(&self) {
        self.inner.terminate(DisconnectReason::Requested);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AuthConfig, MqServiceConfig};
    use crate::message::{make_envelope, SystemClock};
    use std::time::Duration;

    async fn open(connector: &LoopbackConnector) -> Arc<dyn Session> {
        let svc = MqServiceConfig::new("hub", "hub", 1, AuthConfig::user_pass("u", "env:UNUSED"));
        connector.connect(&ConnectorParams::from_service(&svc)).await.unwrap()
    }

    #[tokio::test]
    async fn deferred_message_is_requeued_on_unsubscribe() {
        let connector = LoopbackConnector::new(LoopbackHub::new());
        let (a, b) = (open(&connector).await, open(&connector).await);
        let deferring = a
            .subscribe(SubscriptionSpec::new("/queue/D", AckMode::ClientIndividual, |_| Err(HandlerError::Deferred)))
            .await
            .unwrap();
        let env = make_envelope(serde_json::json!({"k": 1}), "t", "/queue/D", &SystemClock);
        a.put("/queue/D", &env, true).await.unwrap();
        tokio::time::sleep(Duration::from_millis(20)).await;
        assert_eq!(connector.hub().queue_depth("/queue/D"), 0);

        let got = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&got);
        b.subscribe(SubscriptionSpec::new("/queue/D", AckMode::ClientIndividual, move |d| {
            sink.lock().push(d.envelope.message_id.clone());
            Ok(())
        }))
        .await
        .unwrap();
        a.unsubscribe(deferring).await.unwrap();
        tokio::time::sleep(Duration::from_millis(20)).await;
        assert_eq!(*got.lock(), vec![env.message_id]);
    }
}
