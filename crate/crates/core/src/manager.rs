//! Shares one physical connection per MQ service among all producers and
//! consumers of that service.
//!
//! Each service key moves through `Opening -> Live -> Draining -> (gone)`.
//! The state map sits behind a single lock; connecting and disconnecting
//! happen outside it, and anyone who finds a key mid-transition waits for the
//! transition to finish and then retries.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::sync::watch;
use tracing::debug;

use crate::config::{resolve, ConfigError, ConfigTree, DestinationSpec, ResolvedDestination};
use crate::connector::{
    run_reconnect_loop, ConnectError, ConnectorParams, ConnectorRegistry, Session, SessionFactory,
    SupervisedSession, DEFAULT_CONNECT_TIMEOUT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Producer,
    Consumer,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Producer => "producer",
            Role::Consumer => "consumer",
        }
    }
}

/// Identifies one registered user of a shared connection, e.g.
/// `mq.example::Queue::Q1` acquired as producer yields
/// `mq.example/Queue/Q1/producer4`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UserToken {
    pub token: String,
    pub role: Role,
    service_id: String,
}

impl UserToken {
    pub fn service_id(&self) -> &str {
        &self.service_id
    }
}

impl fmt::Display for UserToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ManagerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Connect(#[from] ConnectError),
    #[error("unknown or already released token {0:?}")]
    UnknownToken(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseOutcome {
    Closed,
    StillShared,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionStatus {
    pub service_id: String,
    pub users: usize,
    pub connected: bool,
}

#[derive(Debug, Clone)]
pub struct ManagerOptions {
    /// Randomize reconnect backoff (off makes the delay sequence deterministic).
    pub jitter: bool,
    pub connect_timeout: Duration,
}

impl Default for ManagerOptions {
    fn default() -> Self {
        ManagerOptions {
            jitter: true,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
        }
    }
}

struct Record {
    session: Arc<SupervisedSession>,
    users: BTreeMap<String, DestinationSpec>,
}

enum Slot {
    Opening(Arc<watch::Sender<bool>>),
    Live(Record),
    Draining(Arc<watch::Sender<bool>>),
}

pub struct ConnectionManager {
    registry: ConnectorRegistry,
    options: ManagerOptions,
    slots: Mutex<HashMap<String, Slot>>,
    counter: AtomicU64,
}

impl ConnectionManager {
    pub fn new(registry: ConnectorRegistry) -> Arc<Self> {
        Self::with_options(registry, ManagerOptions::default())
    }

    pub fn with_options(registry: ConnectorRegistry, options: ManagerOptions) -> Arc<Self> {
        Arc::new(ConnectionManager {
            registry,
            options,
            slots: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    pub fn registry(&self) -> &ConnectorRegistry {
        &self.registry
    }

    /// Registers a user for the service behind `query`, connecting if needed.
    pub async fn acquire(
        &self,
        tree: &ConfigTree,
        query: &str,
        role: Role,
    ) -> Result<(Arc<SupervisedSession>, UserToken), ManagerError> {
        let resolved = resolve(tree, query)?;
        self.acquire_resolved(&resolved, role).await
    }

    pub async fn acquire_resolved(
        &self,
        resolved: &ResolvedDestination,
        role: Role,
    ) -> Result<(Arc<SupervisedSession>, UserToken), ManagerError> {
        let key = resolved.service.service_id.clone();
        enum Next {
            Wait(watch::Receiver<bool>),
            Open(Arc<watch::Sender<bool>>),
        }
        loop {
            let next = {
                let mut slots = self.slots.lock();
                match slots.get_mut(&key) {
                    Some(Slot::Live(record)) => {
                        let token = self.issue_token(&resolved.destination, role);
                        record.users.insert(token.token.clone(), resolved.destination.clone());
                        return Ok((Arc::clone(&record.session), token));
                    }
                    Some(Slot::Opening(tx)) | Some(Slot::Draining(tx)) => Next::Wait(tx.subscribe()),
                    None => {
                        let (tx, _) = watch::channel(false);
                        let tx = Arc::new(tx);
                        slots.insert(key.clone(), Slot::Opening(Arc::clone(&tx)));
                        Next::Open(tx)
                    }
                }
            };
            match next {
                Next::Wait(mut waiter) => {
                    let _ = waiter.changed().await;
                }
                Next::Open(tx) => return self.open(resolved, role, tx).await,
            }
        }
    }

    async fn open(
        &self,
        resolved: &ResolvedDestination,
        role: Role,
        tx: Arc<watch::Sender<bool>>,
    ) -> Result<(Arc<SupervisedSession>, UserToken), ManagerError> {
        let key = &resolved.service.service_id;
        let connected = self.connect(resolved).await;
        let mut slots = self.slots.lock();
        let result = match connected {
            Ok(session) => {
                let token = self.issue_token(&resolved.destination, role);
                let mut users = BTreeMap::new();
                users.insert(token.token.clone(), resolved.destination.clone());
                slots.insert(
                    key.clone(),
                    Slot::Live(Record {
                        session: Arc::clone(&session),
                        users,
                    }),
                );
                debug!(service = %key, "opened shared connection");
                Ok((session, token))
            }
            Err(e) => {
                slots.remove(key);
                Err(e)
            }
        };
        drop(slots);
        let _ = tx.send(true);
        result
    }

    async fn connect(&self, resolved: &ResolvedDestination) -> Result<Arc<SupervisedSession>, ManagerError> {
        let svc = &resolved.service;
        let connector = self.registry.get(&svc.protocol)?;
        let mut params = ConnectorParams::from_service(svc);
        params.connect_timeout = self.options.connect_timeout;
        let factory: SessionFactory = Arc::new(move || {
            let connector = Arc::clone(&connector);
            let params = params.clone();
            Box::pin(async move { connector.connect(&params).await })
        });
        Ok(run_reconnect_loop(factory, svc.reconnect, self.options.jitter).await?)
    }

    fn issue_token(&self, dest: &DestinationSpec, role: Role) -> UserToken {
        let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
        UserToken {
            token: format!("{}/{}/{}/{}{n}", dest.service_id, dest.kind, dest.name, role.as_str()),
            role,
            service_id: dest.service_id.clone(),
        }
    }

    /// Removes a user; the last user out closes the connection.
    pub async fn release(&self, token: &UserToken) -> Result<ReleaseOutcome, ManagerError> {
        let key = token.service_id();
        let (session, tx) = {
            let mut slots = self.slots.lock();
            let Some(Slot::Live(record)) = slots.get_mut(key) else {
                return Err(ManagerError::UnknownToken(token.token.clone()));
            };
            if record.users.remove(&token.token).is_none() {
                return Err(ManagerError::UnknownToken(token.token.clone()));
            }
            if !record.users.is_empty() {
                return Ok(ReleaseOutcome::StillShared);
            }
            let session = Arc::clone(&record.session);
            let (tx, _) = watch::channel(false);
            let tx = Arc::new(tx);
            slots.insert(key.to_string(), Slot::Draining(Arc::clone(&tx)));
            (session, tx)
        };
        session.disconnect().await;
        {
            let mut slots = self.slots.lock();
            if matches!(slots.get(key), Some(Slot::Draining(t)) if Arc::ptr_eq(t, &tx)) {
                slots.remove(key);
            }
        }
        let _ = tx.send(true);
        debug!(service = %key, "closed shared connection");
        Ok(ReleaseOutcome::Closed)
    }

    /// Point-in-time view of live records, sorted by service id.
    pub fn active_connections(&self) -> Vec<ConnectionStatus> {
        let slots = self.slots.lock();
        let mut out: Vec<ConnectionStatus> = slots
            .iter()
            .filter_map(|(key, slot)| match slot {
                Slot::Live(record) => Some(ConnectionStatus {
                    service_id: key.clone(),
                    users: record.users.len(),
                    connected: record.session.is_connected(),
                }),
                _ => None,
            })
            .collect();
        out.sort_by(|a, b| a.service_id.cmp(&b.service_id));
        out
    }

    /// Disconnects every live record regardless of its users. Tokens issued
    /// before the call become unknown.
    pub async fn stop_all(&self) -> usize {
        let records: Vec<(String, Record)> = {
            let mut slots = self.slots.lock();
            let keys: Vec<String> = slots
                .iter()
                .filter(|(_, s)| matches!(s, Slot::Live(_)))
                .map(|(k, _)| k.clone())
                .collect();
            keys.into_iter()
                .filter_map(|k| match slots.remove(&k) {
                    Some(Slot::Live(r)) => Some((k, r)),
                    _ => None,
                })
                .collect()
        };
        let count = records.len();
        for (key, record) in records {
            record.session.disconnect().await;
            debug!(service = %key, users = record.users.len(), "stopped connection");
        }
        count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AuthConfig, MqServiceConfig};
    use crate::connector::{LoopbackConnector, LoopbackHub};

    fn setup() -> (Arc<ConnectionManager>, Arc<LoopbackHub>, ConfigTree) {
        let hub = LoopbackHub::new();
        let mut registry = ConnectorRegistry::empty();
        registry.register("loopback", Arc::new(LoopbackConnector::new(Arc::clone(&hub))));
        let svc = |id: &str| {
            let mut s = MqServiceConfig::new(id, "localhost", 1, AuthConfig::user_pass("u", "env:UNUSED"))
                .with_queue("Q1")
                .with_queue("Q2")
                .with_topic("T1");
            s.protocol = "loopback".into();
            s.reconnect.initial_backoff_ms = 10;
            s.reconnect.max_backoff_ms = 50;
            s
        };
        let tree = ConfigTree::new().with_service(svc("s")).with_service(svc("t"));
        let opts = ManagerOptions { jitter: false, ..Default::default() };
        (ConnectionManager::with_options(registry, opts), hub, tree)
    }

    #[tokio::test]
    async fn reuses_one_connection_per_service() {
        let (mgr, hub, tree) = setup();
        let (_, p) = mgr.acquire(&tree, "s::Queue::Q1", Role::Producer).await.unwrap();
        let (_, c) = mgr.acquire(&tree, "s::Queue::Q2", Role::Consumer).await.unwrap();
        assert_ne!(p, c);
        assert_eq!(hub.open_sessions(), 1);
        assert_eq!(mgr.active_connections(), vec![ConnectionStatus { service_id: "s".into(), users: 2, connected: true }]);
        let (_, _) = mgr.acquire(&tree, "t::Topic::T1", Role::Consumer).await.unwrap();
        assert_eq!(hub.open_sessions(), 2);
    }

    #[tokio::test]
    async fn tokens_count_up() {
        let (mgr, _hub, tree) = setup();
        let (_, a) = mgr.acquire(&tree, "s::Queue::Q1", Role::Producer).await.unwrap();
        let (_, b) = mgr.acquire(&tree, "s::Queue::Q1", Role::Producer).await.unwrap();
        assert_eq!(a.token, "s/Queue/Q1/producer1");
        assert_eq!(b.token, "s/Queue/Q1/producer2");
    }

    #[tokio::test]
    async fn release_closes_on_last_user() {
        let (mgr, hub, tree) = setup();
        let (_, a) = mgr.acquire(&tree, "s::Queue::Q1", Role::Producer).await.unwrap();
        let (_, b) = mgr.acquire(&tree, "s::Queue::Q2", Role::Consumer).await.unwrap();
        assert_eq!(mgr.release(&a).await.unwrap(), ReleaseOutcome::StillShared);
        assert_eq!(hub.open_sessions(), 1);
        assert_eq!(mgr.release(&b).await.unwrap(), ReleaseOutcome::Closed);
        assert_eq!(hub.open_sessions(), 0);
        assert!(mgr.active_connections().is_empty());
        assert!(matches!(mgr.release(&b).await, Err(ManagerError::UnknownToken(_))));
    }

    #[tokio::test]
    async fn stop_all_is_idempotent_and_manager_stays_usable() {
        let (mgr, hub, tree) = setup();
        assert_eq!(mgr.stop_all().await, 0);
        let (_, a) = mgr.acquire(&tree, "s::Queue::Q1", Role::Producer).await.unwrap();
        mgr.acquire(&tree, "t::Queue::Q1", Role::Producer).await.unwrap();
        assert_eq!(mgr.stop_all().await, 2);
        assert_eq!(mgr.stop_all().await, 0);
        assert_eq!(hub.open_sessions(), 0);
        assert!(matches!(mgr.release(&a).await, Err(ManagerError::UnknownToken(_))));
        mgr.acquire(&tree, "s::Queue::Q1", Role::Producer).await.unwrap();
        assert_eq!(hub.open_sessions(), 1);
    }

    #[tokio::test]
    async fn snapshot_reports_disconnected_while_down() {
        let (mgr, hub, tree) = setup();
        for _ in 0..3 {
            mgr.acquire(&tree, "s::Queue::Q1", Role::Producer).await.unwrap();
        }
        hub.set_available(false);
        tokio::time::sleep(Duration::from_millis(20)).await;
        assert_eq!(mgr.active_connections(), vec![ConnectionStatus { service_id: "s".into(), users: 3, connected: false }]);
        hub.set_available(true);
        for _ in 0..100 {
            if mgr.active_connections()[0].connected {
                break;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        assert!(mgr.active_connections()[0].connected);
    }

    #[tokio::test]
    async fn resolve_errors_propagate() {
        let (mgr, _hub, tree) = setup();
        assert!(matches!(
            mgr.acquire(&tree, "s::Queue::nope", Role::Producer).await,
            Err(ManagerError::Config(ConfigError::UndeclaredDestination(_)))
        ));
        assert!(matches!(
            mgr.acquire(&tree, "zz::Queue::Q1", Role::Producer).await,
            Err(ManagerError::Config(ConfigError::UnknownService(_)))
        ));
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn concurrent_acquire_release_is_linearizable() {
        let (mgr, hub, tree) = setup();
        let tree = Arc::new(tree);
        let mut tasks = Vec::new();
        for w in 0..16u64 {
            let (mgr, tree, hub) = (Arc::clone(&mgr), Arc::clone(&tree), Arc::clone(&hub));
            tasks.push(tokio::spawn(async move {
                for i in 0..50u64 {
                    let q = if (w + i) % 2 == 0 { "s::Queue::Q1" } else { "t::Topic::T1" };
                    let (session, token) = mgr.acquire(&tree, q, Role::Producer).await.unwrap();
                    assert!(session.is_connected());
                    assert!(hub.open_sessions() <= 2);
                    mgr.release(&token).await.unwrap();
                }
            }));
        }
        for t in tasks {
            t.await.unwrap();
        }
        assert!(mgr.active_connections().is_empty());
        assert_eq!(hub.open_sessions(), 0);
    }
}
