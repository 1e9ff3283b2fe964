//! Structured session log: one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use parking_lot::Mutex;
use serde_json::{Map, Value};

#[derive(Default)]
pub struct SessionLog {
    lines: Mutex<Vec<String>>,
    file: Option<Mutex<File>>,
}

impl SessionLog {
    pub fn in_memory() -> Self {
        SessionLog::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(SessionLog {
            lines: Mutex::new(Vec::new()),
            file: Some(Mutex::new(file)),
        })
    }

    /// Appends `{"event": event, "ts_ms": now, ...fields}`.
    pub fn record(&self, event: &str, fields: Value) {
        let mut obj = match fields {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        obj.insert("event".into(), Value::String(event.into()));
        obj.insert("ts_ms".into(), Value::from(mqware::message::now_ms()));
        let line = Value::Object(obj).to_string();
        // hold the memory lock across the file write so both orders agree
        let mut lines = self.lines.lock();
        if let Some(f) = &self.file {
            let mut f = f.lock();
            let _ = writeln!(f, "{line}");
        }
        lines.push(line);
    }

    pub fn lines(&self) -> Vec<String> {
        self.lines.lock().clone()
    }

    pub fn events(&self) -> Vec<Value> {
        self.lines
            .lock()
            .iter()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.lines.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replays open/close events and returns the highest number of sessions
/// that were open at once for each virtual host.
pub fn max_concurrent_sessions(events: &[Value]) -> std::collections::BTreeMap<String, usize> {
    use std::collections::{BTreeMap, HashMap};
    let mut open: HashMap<u64, String> = HashMap::new();
    let mut current: BTreeMap<String, usize> = BTreeMap::new();
    let mut peak: BTreeMap<String, usize> = BTreeMap::new();
    for ev in events {
        let Some(session) = ev.get("session").and_then(Value::as_u64) else { continue };
        match ev.get("event").and_then(Value::as_str) {
            Some("session_open") => {
                let vhost = ev.get("vhost").and_then(Value::as_str).unwrap_or("").to_string();
                let n = current.entry(vhost.clone()).or_default();
                *n += 1;
                let p = peak.entry(vhost.clone()).or_default();
                *p = (*p).max(*n);
                open.insert(session, vhost);
            }
            Some("session_close") => {
                if let Some(vhost) = open.remove(&session) {
                    *current.get_mut(&vhost).expect("tracked") -= 1;
                }
            }
            _ => {}
        }
    }
    peak
}
