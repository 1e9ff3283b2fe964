//! Live send with spool fallback, plus a background drain on reconnect.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::sync::broadcast::error::RecvError;
use tokio::task::JoinHandle;
use tracing::{debug, error, info, warn};

use super::{Spool, SpoolError};
use crate::api::PutOutcome;
use crate::connector::{ConnectorEvent, Session};
use crate::message::MessageEnvelope;

/// How often the drain task checks for leftovers besides `Connected` events.
const DRAIN_POLL: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum FailoverError {
    #[error("message lost: live send failed and spool is full: {0}")]
    DiskFull(String),
    #[error("message lost: live send failed and spool write failed: {0}")]
    Io(String),
}

impl From<SpoolError> for FailoverError {
    fn from(e: SpoolError) -> Self {
        match e {
            SpoolError::DiskFull(m) => FailoverError::DiskFull(m),
            other => FailoverError::Io(other.to_string()),
        }
    }
}

/// A spool guarding one producer. The async lock is the send gate: while a
/// drain holds it, live sends wait, so spooled entries always go out first.
pub struct FailoverSpool {
    spool: tokio::sync::Mutex<Spool>,
    depth: AtomicU64,
    drain_task: Mutex<Option<JoinHandle<()>>>,
}

impl FailoverSpool {
    pub fn new(spool: Spool) -> Arc<Self> {
        let depth = AtomicU64::new(spool.pending());
        Arc::new(FailoverSpool {
            spool: tokio::sync::Mutex::new(spool),
            depth,
            drain_task: Mutex::new(None),
        })
    }

    /// Entries waiting for replay.
    pub fn depth(&self) -> u64 {
        self.depth.load(Ordering::SeqCst)
    }

    pub async fn counters(&self) -> super::SpoolCounters {
        self.spool.lock().await.counters()
    }

    /// Sends `env` live, or spools it if the session is down or the send fails.
    pub async fn put_with_failover(
        &self,
        session: &dyn Session,
        wire_path: &str,
        env: &MessageEnvelope,
        confirm: bool,
    ) -> Result<PutOutcome, FailoverError> {
        let mut spool = self.spool.lock().await;
        if !spool.is_empty() && session.is_connected() {
            if let Err(e) = spool.replay(session).await {
                debug!(error = %e, "inline drain interrupted");
            }
            self.depth.store(spool.pending(), Ordering::SeqCst);
        }
        if spool.is_empty() && session.is_connected() {
            match session.put(wire_path, env, confirm).await {
                Ok(()) => return Ok(PutOutcome::Delivered),
                Err(e) => debug!(error = %e, "live send failed, spooling"),
            }
        }
        let appended = spool.append(wire_path, env);
        self.depth.store(spool.pending(), Ordering::SeqCst);
        match appended {
            Ok(_) => Ok(PutOutcome::Spooled),
            Err(e) => {
                error!(error = %e, message_id = %env.message_id, "message dropped");
                Err(e.into())
            }
        }
    }

    /// Replays everything pending; returns the number of entries sent.
    pub async fn drain(&self, session: &dyn Session) -> Result<usize, SpoolError> {
        let mut spool = self.spool.lock().await;
        if spool.is_empty() {
            return Ok(0);
        }
        let result = spool.replay(session).await;
        self.depth.store(spool.pending(), Ordering::SeqCst);
        if let Ok(n) = &result {
            info!(replayed = n, "spool drained");
        }
        result
    }

    /// Starts the background drain for `session`: on every `Connected`
    /// event, and on a slow poll while anything is pending.
    pub fn attach(self: &Arc<Self>, session: Arc<dyn Session>) {
        let this = Arc::clone(self);
        let task = tokio::spawn(async move {
            let mut events = session.events();
            let mut poll = tokio::time::interval(DRAIN_POLL);
            loop {
                tokio::select! {
                    ev = events.recv() => match ev {
                        Ok(ConnectorEvent::Connected) | Err(RecvError::Lagged(_)) => {}
                        Ok(_) => continue,
                        Err(RecvError::Closed) => return,
                    },
                    _ = poll.tick() => {}
                }
                if this.depth() > 0 && session.is_connected() {
                    if let Err(e) = this.drain(session.as_ref()).await {
                        warn!(error = %e, "background drain interrupted");
                    }
                }
            }
        });
        if let Some(old) = self.drain_task.lock().replace(task) {
            old.abort();
        }
    }

    pub fn detach(&self) {
        if let Some(task) = self.drain_task.lock().take() {
            task.abort();
        }
    }
}

impl Drop for FailoverSpool {
    fn drop(&mut self) {
        self.detach();
    }
}
