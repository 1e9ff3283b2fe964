//! Destination state. Every mutation runs on one task that receives
//! [`CoreMsg`]s from the session handlers.

use std::collections::{BTreeMap, HashMap, VecDeque};

use mqware::stomp::{Command, Frame};
use tokio::sync::{mpsc, oneshot};

pub(crate) const QUEUE_PREFIX: &str = "/queue/";
pub(crate) const TOPIC_PREFIX: &str = "/topic/";

/// Sender-side headers that the broker owns or strips when relaying.
const RESERVED: [&str; 7] = [
    "destination",
    "message-id",
    "receipt",
    "content-length",
    "transaction",
    "subscription",
    "ack",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum AckKind {
    Auto,
    /// `client` is treated as `client-individual`.
    Individual,
}

impl AckKind {
    pub(crate) fn parse(value: Option<&str>) -> Option<Self> {
        match value {
            None | Some("auto") => Some(AckKind::Auto),
            Some("client-individual") | Some("client") => Some(AckKind::Individual),
            Some(_) => None,
        }
    }
}

pub(crate) enum Outbound {
    Frame(Frame),
    /// Sent after an ERROR frame: flush and drop the connection.
    Close,
}

pub(crate) enum CoreMsg {
    Open {
        session: u64,
        tx: mpsc::UnboundedSender<Outbound>,
    },
    Subscribe {
        session: u64,
        id: String,
        destination: String,
        ack: AckKind,
        receipt: Option<String>,
    },
    Unsubscribe {
        session: u64,
        id: String,
        receipt: Option<String>,
    },
    Send {
        session: u64,
        destination: String,
        headers: Vec<(String, String)>,
        body: Vec<u8>,
        receipt: Option<String>,
    },
    Ack {
        session: u64,
        id: String,
        receipt: Option<String>,
    },
    Nack {
        session: u64,
        id: String,
        receipt: Option<String>,
    },
    Close {
        session: u64,
        reply: oneshot::Sender<usize>,
    },
    Stats {
        reply: oneshot::Sender<BrokerStats>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub pending: usize,
    pub unacked: usize,
    pub subscribers: usize,
    pub published: u64,
    pub delivered: u64,
    pub acked: u64,
    pub redelivered: u64,
    pub dead_lettered: u64,
    pub depth_dropped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerStats {
    pub sessions: usize,
    pub queues: BTreeMap<String, QueueStats>,
    pub topic_subscribers: BTreeMap<String, usize>,
    pub topic_published: u64,
    pub topic_dropped: u64,
}

impl BrokerStats {
    pub fn queue(&self, path: &str) -> QueueStats {
        self.queues.get(path).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
struct Stored {
    seq: u64,
    message_id: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
    nacks: u32,
    redelivered: bool,
}

struct QueueSub {
    session: u64,
    id: String,
    ack: AckKind,
    inflight: usize,
}

#[derive(Default)]
struct Queue {
    pending: VecDeque<Stored>,
    subs: Vec<QueueSub>,
    cursor: usize,
    stats: QueueStats,
}

struct TopicSub {
    session: u64,
    id: String,
    ack: AckKind,
}

struct Unacked {
    session: u64,
    sub_id: String,
    /// None for topic deliveries, which are never redelivered.
    queue: Option<String>,
    message: Stored,
}

struct SessionEntry {
    tx: mpsc::UnboundedSender<Outbound>,
    subs: HashMap<String, String>,
}

pub(crate) struct Core {
    sessions: HashMap<u64, SessionEntry>,
    queues: HashMap<String, Queue>,
    topics: HashMap<String, Vec<TopicSub>>,
    unacked: HashMap<String, Unacked>,
    next_seq: u64,
    next_ack: u64,
    depth_limit: usize,
    max_redeliveries: u32,
    topic_published: u64,
    topic_dropped: u64,
}

pub(crate) async fn run_core(mut rx: mpsc::UnboundedReceiver<CoreMsg>, depth_limit: usize, max_redeliveries: u32) {
    let mut core = Core::new(depth_limit, max_redeliveries);
    while let Some(msg) = rx.recv().await {
        core.handle(msg);
    }
}

fn error_frame(message: &str, detail: &str) -> Frame {
    Frame::new(Command::Error)
        .header("message", message)
        .header("content-type", "text/plain")
        .body(detail.as_bytes().to_vec())
}

impl Core {
    pub(crate) fn new(depth_limit: usize, max_redeliveries: u32) -> Self {
        Core {
            sessions: HashMap::new(),
            queues: HashMap::new(),
            topics: HashMap::new(),
            unacked: HashMap::new(),
            next_seq: 1,
            next_ack: 1,
            depth_limit,
            max_redeliveries,
            topic_published: 0,
            topic_dropped: 0,
        }
    }

    pub(crate) fn handle(&mut self, msg: CoreMsg) {
        match msg {
            CoreMsg::Open { session, tx } => {
                self.sessions.insert(
                    session,
                    SessionEntry {
                        tx,
                        subs: HashMap::new(),
                    },
                );
            }
            CoreMsg::Subscribe {
                session,
                id,
                destination,
                ack,
                receipt,
            } => {
                if self.subscribe(session, id, destination, ack) {
                    self.receipt(session, receipt);
                }
            }
            CoreMsg::Unsubscribe { session, id, receipt } => {
                if self.unsubscribe(session, &id) {
                    self.receipt(session, receipt);
                }
            }
            CoreMsg::Send {
                session,
                destination,
                headers,
                body,
                receipt,
            } => {
                if self.route_send(session, destination, headers, body) {
                    self.receipt(session, receipt);
                }
            }
            CoreMsg::Ack { session, id, receipt } => {
                if self.ack(session, &id, false) {
                    self.receipt(session, receipt);
                }
            }
            CoreMsg::Nack { session, id, receipt } => {
                if self.ack(session, &id, true) {
                    self.receipt(session, receipt);
                }
            }
            CoreMsg::Close { session, reply } => {
                let _ = reply.send(self.teardown(session));
            }
            CoreMsg::Stats { reply } => {
                let _ = reply.send(self.stats());
            }
        }
    }

    fn send_to(&self, session: u64, out: Outbound) -> bool {
        self.sessions.get(&session).is_some_and(|s| s.tx.send(out).is_ok())
    }

    fn receipt(&self, session: u64, receipt: Option<String>) {
        if let Some(id) = receipt {
            self.send_to(session, Outbound::Frame(Frame::new(Command::Receipt).header("receipt-id", id)));
        }
    }

    fn fail(&self, session: u64, message: &str, detail: &str) {
        self.send_to(session, Outbound::Frame(error_frame(message, detail)));
        self.send_to(session, Outbound::Close);
    }

    fn subscribe(&mut self, session: u64, id: String, destination: String, ack: AckKind) -> bool {
        let Some(entry) = self.sessions.get_mut(&session) else { return false };
        if entry.subs.contains_key(&id) {
            self.fail(session, "duplicate subscription id", &id);
            return false;
        }
        if let Some(name) = destination.strip_prefix(QUEUE_PREFIX).filter(|n| !n.is_empty()) {
            let _ = name;
            entry.subs.insert(id.clone(), destination.clone());
            let queue = self.queues.entry(destination.clone()).or_default();
            queue.subs.push(QueueSub {
                session,
                id,
                ack,
                inflight: 0,
            });
            self.dispatch(&destination);
            true
        } else if destination.strip_prefix(TOPIC_PREFIX).is_some_and(|n| !n.is_empty()) {
            entry.subs.insert(id.clone(), destination.clone());
            self.topics
                .entry(destination)
                .or_default()
                .push(TopicSub { session, id, ack });
            true
        } else {
            self.fail(session, "unknown destination", &destination);
            false
        }
    }

    fn unsubscribe(&mut self, session: u64, id: &str) -> bool {
        let Some(destination) = self.sessions.get_mut(&session).and_then(|e| e.subs.remove(id)) else {
            self.fail(session, "unknown subscription", id);
            return false;
        };
        self.remove_subscriptions(session, Some(id), Some(&destination));
        true
    }

    /// Drops subscriptions of `session` (optionally just `id`) and requeues
    /// their unacked queue messages at the head in original order.
    fn remove_subscriptions(&mut self, session: u64, id: Option<&str>, destination: Option<&str>) -> usize {
        let matches = |s: u64, sub: &str| s == session && id.is_none_or(|i| i == sub);
        let ack_ids: Vec<String> = self
            .unacked
            .iter()
            .filter(|(_, u)| matches(u.session, &u.sub_id))
            .map(|(k, _)| k.clone())
            .collect();
        let mut returned: Vec<(String, Stored)> = Vec::new();
        for ack_id in ack_ids {
            let u = self.unacked.remove(&ack_id).expect("listed");
            if let Some(q) = u.queue {
                returned.push((q, u.message));
            }
        }
        returned.sort_by_key(|(_, m)| std::cmp::Reverse(m.seq));
        let requeued = returned.len();
        let mut touched: Vec<String> = Vec::new();
        for (q, mut m) in returned {
            m.redelivered = true;
            let queue = self.queues.entry(q.clone()).or_default();
            queue.stats.redelivered += 1;
            queue.pending.push_front(m);
            touched.push(q);
        }
        for (path, queue) in self.queues.iter_mut() {
            if destination.is_some_and(|d| d != path) {
                continue;
            }
            let before = queue.subs.len();
            let mut idx = 0;
            let cursor = queue.cursor;
            let mut new_cursor = cursor;
            queue.subs.retain(|s| {
                let keep = !matches(s.session, &s.id);
                if !keep && idx < cursor {
                    new_cursor -= 1;
                }
                idx += 1;
                keep
            });
            if queue.subs.len() != before {
                queue.cursor = if queue.subs.is_empty() { 0 } else { new_cursor % queue.subs.len() };
                touched.push(path.clone());
            }
        }
        for (path, subs) in self.topics.iter_mut() {
            if destination.is_some_and(|d| d != path) {
                continue;
            }
            subs.retain(|s| !matches(s.session, &s.id));
        }
        touched.sort();
        touched.dedup();
        for q in touched {
            self.dispatch(&q);
        }
        requeued
    }

    fn route_send(&mut self, session: u64, destination: String, headers: Vec<(String, String)>, body: Vec<u8>) -> bool {
        let seq = self.next_seq;
        self.next_seq += 1;
        let message_id = headers
            .iter()
            .find(|(k, _)| k == "message-id")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| format!("broker-{seq}"));
        let kept: Vec<(String, String)> = headers
            .into_iter()
            .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
            .collect();
        let stored = Stored {
            seq,
            message_id,
            headers: kept,
            body,
            nacks: 0,
            redelivered: false,
        };
        if destination.strip_prefix(QUEUE_PREFIX).is_some_and(|n| !n.is_empty()) {
            let queue = self.queues.entry(destination.clone()).or_default();
            if queue.pending.len() >= self.depth_limit {
                queue.stats.depth_dropped += 1;
                self.fail(session, "queue depth exceeded", &destination);
                return false;
            }
            queue.stats.published += 1;
            queue.pending.push_back(stored);
            self.dispatch(&destination);
            true
        } else if destination.strip_prefix(TOPIC_PREFIX).is_some_and(|n| !n.is_empty()) {
            self.topic_published += 1;
            let subs: Vec<(u64, String, AckKind)> = self
                .topics
                .get(&destination)
                .map(|v| v.iter().map(|s| (s.session, s.id.clone(), s.ack)).collect())
                .unwrap_or_default();
            if subs.is_empty() {
                self.topic_dropped += 1;
            }
            for (sub_session, sub_id, ack) in subs {
                let ack_id = (ack == AckKind::Individual).then(|| self.fresh_ack_id());
                let frame = message_frame(&destination, &sub_id, ack_id.as_deref(), &stored);
                if self.send_to(sub_session, Outbound::Frame(frame)) {
                    if let Some(ack_id) = ack_id {
                        self.unacked.insert(
                            ack_id,
                            Unacked {
                                session: sub_session,
                                sub_id,
                                queue: None,
                                message: stored.clone(),
                            },
                        );
                    }
                }
            }
            true
        } else {
            self.fail(session, "unknown destination", &destination);
            false
        }
    }

    fn fresh_ack_id(&mut self) -> String {
        let id = format!("ack-{}", self.next_ack);
        self.next_ack += 1;
        id
    }

    /// Strict round-robin, one unacked message per client-individual
    /// subscription: when the subscriber at the cursor is still busy,
    /// dispatch waits for it instead of skipping ahead.
    fn dispatch(&mut self, path: &str) {
        loop {
            let Some(queue) = self.queues.get_mut(path) else { return };
            if queue.pending.is_empty() || queue.subs.is_empty() {
                return;
            }
            let idx = queue.cursor % queue.subs.len();
            let sub = &queue.subs[idx];
            if sub.ack == AckKind::Individual && sub.inflight > 0 {
                return;
            }
            let (sub_session, sub_id, ack) = (sub.session, sub.id.clone(), sub.ack);
            let message = queue.pending.pop_front().expect("non-empty");
            let ack_id = (ack == AckKind::Individual).then(|| {
                let id = format!("ack-{}", self.next_ack);
                self.next_ack += 1;
                id
            });
            let frame = message_frame(path, &sub_id, ack_id.as_deref(), &message);
            let delivered = self
                .sessions
                .get(&sub_session)
                .is_some_and(|s| s.tx.send(Outbound::Frame(frame)).is_ok());
            let queue = self.queues.get_mut(path).expect("present");
            if !delivered {
                // the session is going away; its teardown will fix the subscriber list
                queue.pending.push_front(message);
                queue.subs.remove(idx);
                if queue.cursor >= queue.subs.len() {
                    queue.cursor = 0;
                }
                continue;
            }
            queue.stats.delivered += 1;
            queue.cursor = (idx + 1) % queue.subs.len();
            match ack_id {
                Some(ack_id) => {
                    queue.subs[idx].inflight += 1;
                    self.unacked.insert(
                        ack_id,
                        Unacked {
                            session: sub_session,
                            sub_id,
                            queue: Some(path.to_string()),
                            message,
                        },
                    );
                }
                None => queue.stats.acked += 1,
            }
        }
    }

    fn ack(&mut self, session: u64, id: &str, negative: bool) -> bool {
        if !self.unacked.get(id).is_some_and(|u| u.session == session) {
            self.fail(session, "unknown ack id", id);
            return false;
        }
        let u = self.unacked.remove(id).expect("checked");
        let Some(path) = u.queue else { return true };
        let queue = self.queues.entry(path.clone()).or_default();
        if let Some(sub) = queue.subs.iter_mut().find(|s| s.session == session && s.id == u.sub_id) {
            sub.inflight = sub.inflight.saturating_sub(1);
        }
        if !negative {
            queue.stats.acked += 1;
            self.dispatch(&path);
            return true;
        }
        let mut message = u.message;
        message.nacks += 1;
        if message.nacks > self.max_redeliveries {
            queue.stats.dead_lettered += 1;
            let name = path.strip_prefix(QUEUE_PREFIX).unwrap_or(&path);
            let dlq = format!("{QUEUE_PREFIX}DLQ.{name}");
            message.redelivered = false;
            let dead = self.queues.entry(dlq.clone()).or_default();
            dead.stats.published += 1;
            dead.pending.push_back(message);
            self.dispatch(&path);
            self.dispatch(&dlq);
        } else {
            message.redelivered = true;
            queue.stats.redelivered += 1;
            queue.pending.push_front(message);
            self.dispatch(&path);
        }
        true
    }

    fn teardown(&mut self, session: u64) -> usize {
        if self.sessions.remove(&session).is_none() {
            return 0;
        }
        self.remove_subscriptions(session, None, None)
    }

    fn stats(&self) -> BrokerStats {
        let mut queues: BTreeMap<String, QueueStats> = self
            .queues
            .iter()
            .map(|(path, q)| {
                let mut s = q.stats.clone();
                s.pending = q.pending.len();
                s.subscribers = q.subs.len();
                (path.clone(), s)
            })
            .collect();
        for u in self.unacked.values() {
            if let Some(q) = &u.queue {
                queues.entry(q.clone()).or_default().unacked += 1;
            }
        }
        BrokerStats {
            sessions: self.sessions.len(),
            queues,
            topic_subscribers: self.topics.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
            topic_published: self.topic_published,
            topic_dropped: self.topic_dropped,
        }
    }
}

fn message_frame(destination: &str, subscription: &str, ack_id: Option<&str>, m: &Stored) -> Frame {
    let mut frame = Frame::new(Command::Message)
        .header("message-id", m.message_id.as_str())
        .header("destination", destination)
        .header("subscription", subscription);
    if let Some(ack_id) = ack_id {
        frame = frame.header("ack", ack_id);
    }
    if m.redelivered {
        frame = frame.header("redelivered", "true");
    }
    frame.headers.extend(m.headers.iter().cloned());
    frame.body(m.body.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Harness {
        core: Core,
        rxs: HashMap<u64, mpsc::UnboundedReceiver<Outbound>>,
    }

    impl Harness {
        fn new() -> Self {
            Harness {
                core: Core::new(100_000, 5),
                rxs: HashMap::new(),
            }
        }

        fn open(&mut self, session: u64) {
            let (tx, rx) = mpsc::unbounded_channel();
            self.core.handle(CoreMsg::Open { session, tx });
            self.rxs.insert(session, rx);
        }

        fn sub(&mut self, session: u64, id: &str, dest: &str, ack: AckKind) {
            self.core.handle(CoreMsg::Subscribe {
                session,
                id: id.into(),
                destination: dest.into(),
                ack,
                receipt: None,
            });
        }

        fn send(&mut self, session: u64, dest: &str, id: &str) {
            self.core.handle(CoreMsg::Send {
                session,
                destination: dest.into(),
                headers: vec![("message-id".into(), id.into()), ("x-k".into(), "v".into())],
                body: id.as_bytes().to_vec(),
                receipt: None,
            });
        }

        fn drain(&mut self, session: u64) -> Vec<Frame> {
            let rx = self.rxs.get_mut(&session).unwrap();
            let mut out = Vec::new();
            while let Ok(o) = rx.try_recv() {
                if let Outbound::Frame(f) = o {
                    out.push(f);
                }
            }
            out
        }

        fn ack(&mut self, session: u64, frame: &Frame, negative: bool) {
            let id = frame.get("ack").unwrap().to_string();
            let msg = if negative {
                CoreMsg::Nack { session, id, receipt: None }
            } else {
                CoreMsg::Ack { session, id, receipt: None }
            };
            self.core.handle(msg);
        }

        fn close(&mut self, session: u64) -> usize {
            let (tx, mut rx) = oneshot::channel();
            self.core.handle(CoreMsg::Close { session, reply: tx });
            rx.try_recv().unwrap()
        }

        fn stats(&mut self) -> BrokerStats {
            let (tx, mut rx) = oneshot::channel();
            self.core.handle(CoreMsg::Stats { reply: tx });
            rx.try_recv().unwrap()
        }
    }

    fn ids(frames: &[Frame]) -> Vec<String> {
        frames.iter().map(|f| f.get("message-id").unwrap().to_string()).collect()
    }

    #[test]
    fn queue_stores_without_consumers() {
        let mut h = Harness::new();
        h.open(1);
        h.send(1, "/queue/Q", "m1");
        assert_eq!(h.stats().queue("/queue/Q").pending, 1);
    }

    #[test]
    fn topic_fans_out_and_drops_without_subscribers() {
        let mut h = Harness::new();
        for s in 1..=4 {
            h.open(s);
        }
        h.send(4, "/topic/T", "lost");
        assert_eq!(h.stats().topic_dropped, 1);
        for s in 1..=3 {
            h.sub(s, "0", "/topic/T", AckKind::Auto);
        }
        h.send(4, "/topic/T", "m1");
        for s in 1..=3 {
            assert_eq!(ids(&h.drain(s)), vec!["m1"]);
        }
        assert!(h.stats().queues.is_empty());
    }

    #[test]
    fn round_robin_between_two_consumers() {
        let mut h = Harness::new();
        h.open(1);
        h.open(2);
        h.open(3);
        h.sub(1, "a", "/queue/Q", AckKind::Individual);
        h.sub(2, "b", "/queue/Q", AckKind::Individual);
        let mut got: HashMap<u64, Vec<String>> = HashMap::new();
        for i in 1..=4 {
            h.send(3, "/queue/Q", &format!("m{i}"));
            for s in [1, 2] {
                for f in h.drain(s) {
                    got.entry(s).or_default().push(f.get("message-id").unwrap().into());
                    h.ack(s, &f, false);
                }
            }
        }
        assert_eq!(got[&1], vec!["m1", "m3"]);
        assert_eq!(got[&2], vec!["m2", "m4"]);
    }

    #[test]
    fn late_subscriber_gets_stored_messages_in_order() {
        let mut h = Harness::new();
        h.open(1);
        for i in 0..1000 {
            h.send(1, "/queue/Q", &format!("m{i}"));
        }
        h.open(2);
        h.sub(2, "s", "/queue/Q", AckKind::Auto);
        let got = ids(&h.drain(2));
        assert_eq!(got, (0..1000).map(|i| format!("m{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn message_frame_keeps_sender_id_first_and_custom_headers() {
        let mut h = Harness::new();
        h.open(1);
        h.sub(1, "s", "/queue/Q", AckKind::Individual);
        h.send(1, "/queue/Q", "abc");
        let f = &h.drain(1)[0];
        assert_eq!(f.headers[0], ("message-id".to_string(), "abc".to_string()));
        assert_eq!(f.get("subscription"), Some("s"));
        assert_eq!(f.get("x-k"), Some("v"));
        assert!(f.get("ack").is_some());
        assert_eq!(f.body, b"abc");
    }

    #[test]
    fn ack_clears_unacked_and_unknown_ack_is_error() {
        let mut h = Harness::new();
        h.open(1);
        h.sub(1, "s", "/queue/Q", AckKind::Individual);
        h.send(1, "/queue/Q", "m");
        let f = h.drain(1).remove(0);
        assert_eq!(h.stats().queue("/queue/Q").unacked, 1);
        h.ack(1, &f, false);
        assert_eq!(h.stats().queue("/queue/Q").unacked, 0);
        h.ack(1, &f, false);
        let err = h.drain(1);
        assert_eq!(err[0].command, Command::Error);
        assert_eq!(err[0].get("message"), Some("unknown ack id"));
    }

    #[test]
    fn nack_redelivers_to_next_subscriber() {
        let mut h = Harness::new();
        h.open(1);
        h.open(2);
        h.sub(1, "a", "/queue/Q", AckKind::Individual);
        h.sub(2, "b", "/queue/Q", AckKind::Individual);
        h.send(1, "/queue/Q", "m");
        let f = h.drain(1).remove(0);
        h.ack(1, &f, true);
        let again = h.drain(2);
        assert_eq!(ids(&again), vec!["m"]);
        assert_eq!(again[0].get("redelivered"), Some("true"));
    }

    #[test]
    fn sixth_nack_dead_letters() {
        let mut h = Harness::new();
        h.open(1);
        h.sub(1, "a", "/queue/Q", AckKind::Individual);
        h.send(1, "/queue/Q", "poison");
        for _ in 0..6 {
            let f = h.drain(1).remove(0);
            h.ack(1, &f, true);
        }
        assert!(h.drain(1).is_empty());
        let stats = h.stats();
        let q = stats.queue("/queue/Q");
        assert_eq!((q.pending, q.unacked, q.dead_lettered), (0, 0, 1));
        assert_eq!(stats.queue("/queue/DLQ.Q").pending, 1);
    }

    #[test]
    fn teardown_requeues_in_original_order() {
        let mut h = Harness::new();
        h.open(1);
        h.open(2);
        h.open(3);
        h.sub(1, "a", "/queue/Q", AckKind::Auto);
        h.send(3, "/queue/Q", "m0");
        h.drain(1);
        // two subscriptions on the dying session so it can hold 2 unacked
        h.sub(2, "x", "/queue/Q", AckKind::Individual);
        h.sub(2, "y", "/queue/Q", AckKind::Individual);
        h.core.handle(CoreMsg::Unsubscribe { session: 1, id: "a".into(), receipt: None });
        h.send(3, "/queue/Q", "m1");
        h.send(3, "/queue/Q", "m2");
        assert_eq!(ids(&h.drain(2)), vec!["m1", "m2"]);
        h.open(4);
        assert_eq!(h.close(2), 2);
        h.sub(4, "z", "/queue/Q", AckKind::Auto);
        let got = h.drain(4);
        assert_eq!(ids(&got), vec!["m1", "m2"]);
        assert!(got.iter().all(|f| f.get("redelivered") == Some("true")));
        assert_eq!(h.close(4), 0);
    }

    #[test]
    fn depth_limit_rejects_sender() {
        let mut h = Harness::new();
        h.core.depth_limit = 2;
        h.open(1);
        for i in 0..3 {
            h.send(1, "/queue/Q", &format!("m{i}"));
        }
        let q = h.stats().queue("/queue/Q");
        assert_eq!((q.pending, q.depth_dropped), (2, 1));
        assert_eq!(h.drain(1)[0].get("message"), Some("queue depth exceeded"));
    }

    #[test]
    fn unknown_prefix_is_error() {
        let mut h = Harness::new();
        h.open(1);
        h.send(1, "/exchange/x", "m");
        assert_eq!(h.drain(1)[0].command, Command::Error);
    }

    #[test]
    fn conservation_at_quiescence() {
        let mut h = Harness::new();
        h.open(1);
        h.open(2);
        h.sub(2, "s", "/queue/Q", AckKind::Individual);
        for i in 0..20 {
            h.send(1, "/queue/Q", &format!("m{i}"));
        }
        for round in 0..10 {
            let frames = h.drain(2);
            for f in frames {
                h.ack(2, &f, round % 3 == 0);
            }
        }
        let q = h.stats().queue("/queue/Q");
        let dlq = h.stats().queue("/queue/DLQ.Q");
        assert_eq!(q.published, q.acked + q.pending as u64 + q.unacked as u64 + dlq.published + q.depth_dropped);
    }
}
