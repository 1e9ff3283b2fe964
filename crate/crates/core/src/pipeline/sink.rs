//! Storage end of the log pipeline: one JSON-lines file per pilot.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde_json::{Map, Value};
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use super::record::is_valid_pilot_uuid;
use crate::api::{create_consumer, ConsumerOptions, DeliveryMode, MqError};
use crate::config::ConfigTree;
use crate::connector::{Delivery, HandlerError};
use crate::manager::ConnectionManager;
use crate::message::{canonical_json, now_ms, MessageEnvelope};

pub const MALFORMED_FILE: &str = "_malformed.log";
pub const DEFAULT_DEDUP_WINDOW: usize = 100_000;

#[derive(Debug, Clone)]
pub struct SinkOptions {
    pub out_dir: PathBuf,
    pub dedup_window: usize,
    pub sync_every: usize,
    pub sync_interval: Duration,
}

impl SinkOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        SinkOptions {
            out_dir: out_dir.into(),
            dedup_window: DEFAULT_DEDUP_WINDOW,
            sync_every: 100,
            sync_interval: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Written,
    Duplicate,
    Quarantined,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SinkStats {
    pub written: u64,
    pub duplicates: u64,
    pub quarantined: u64,
    pub failures: u64,
}

/// Sliding window of recently seen message ids.
#[derive(Debug, Default)]
pub struct DedupWindow {
    order: VecDeque<String>,
    seen: HashSet<String>,
    capacity: usize,
}

impl DedupWindow {
    pub fn new(capacity: usize) -> Self {
        DedupWindow {
            order: VecDeque::new(),
            seen: HashSet::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.seen.contains(id)
    }

    /// Returns false if `id` was already present.
    pub fn insert(&mut self, id: &str) -> bool {
        if self.seen.contains(id) {
            return false;
        }
        self.order.push_back(id.to_string());
        self.seen.insert(id.to_string());
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub struct SinkWriter {
    options: SinkOptions,
    files: HashMap<String, File>,
    dirty: HashSet<String>,
    window: DedupWindow,
    unsynced: usize,
    last_sync: Instant,
    stats: SinkStats,
}

impl SinkWriter {
    /// Opens the output directory and seeds the dedup window from the
    /// `message_id` fields already on disk, newest last.
    pub fn open(options: SinkOptions) -> io::Result<Self> {
        fs::create_dir_all(&options.out_dir)?;
        let mut known: Vec<(u64, String)> = Vec::new();
        for entry in fs::read_dir(&options.out_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("log") {
                continue;
            }
            for line in BufReader::new(File::open(&path)?).lines() {
                let Ok(value) = serde_json::from_str::<Value>(&line?) else { continue };
                if let Some(id) = value.get("message_id").and_then(Value::as_str) {
                    let at = value.get("received_at_ms").and_then(Value::as_u64).unwrap_or(0);
                    known.push((at, id.to_string()));
                }
            }
        }
        known.sort();
        let mut window = DedupWindow::new(options.dedup_window);
        for (_, id) in known {
            window.insert(&id);
        }
        Ok(SinkWriter {
            options,
            files: HashMap::new(),
            dirty: HashSet::new(),
            window,
            unsynced: 0,
            last_sync: Instant::now(),
            stats: SinkStats::default(),
        })
    }

    pub fn stats(&self) -> SinkStats {
        self.stats
    }

    pub fn out_dir(&self) -> &Path {
        &self.options.out_dir
    }

    /// Appends one delivered record. The id enters the dedup window only
    /// once the line is written.
    pub fn write(&mut self, env: &MessageEnvelope) -> io::Result<WriteOutcome> {
        if self.window.contains(&env.message_id) {
            self.stats.duplicates += 1;
            return Ok(WriteOutcome::Duplicate);
        }
        let pilot = env
            .payload
            .get("pilot_uuid")
            .and_then(Value::as_str)
            .filter(|p| is_valid_pilot_uuid(p));
        let (file_key, line, outcome) = match (pilot, env.payload.as_object()) {
            (Some(pilot), Some(obj)) => {
                let mut out = obj.clone();
                out.insert("message_id".into(), Value::String(env.message_id.clone()));
                out.entry("phase").or_insert_with(|| Value::String(super::record::DEFAULT_PHASE.into()));
                out.entry("severity").or_insert_with(|| Value::String("INFO".into()));
                (pilot.to_string(), Value::Object(out), WriteOutcome::Written)
            }
            _ => {
                let mut out = Map::new();
                out.insert("message_id".into(), Value::String(env.message_id.clone()));
                out.insert("origin".into(), Value::String(env.origin.clone()));
                out.insert("payload".into(), env.payload.clone());
                out.insert("received_at_ms".into(), Value::from(now_ms()));
                (String::new(), Value::Object(out), WriteOutcome::Quarantined)
            }
        };
        let mut bytes = canonical_json(&line);
        bytes.push(b'\n');
        let file = self.file_for(&file_key)?;
        if let Err(e) = file.write_all(&bytes) {
            self.stats.failures += 1;
            return Err(e);
        }
        self.dirty.insert(file_key);
        self.window.insert(&env.message_id);
        match outcome {
            WriteOutcome::Written => self.stats.written += 1,
            WriteOutcome::Quarantined => self.stats.quarantined += 1,
            WriteOutcome::Duplicate => {}
        }
        self.unsynced += 1;
        if self.unsynced >= self.options.sync_every || self.last_sync.elapsed() >= self.options.sync_interval {
            self.sync()?;
        }
        Ok(outcome)
    }

    fn file_for(&mut self, key: &str) -> io::Result<&mut File> {
        if !self.files.contains_key(key) {
            let name = if key.is_empty() {
                MALFORMED_FILE.to_string()
            } else {
                format!("{key}.log")
            };
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.options.out_dir.join(name))?;
            self.files.insert(key.to_string(), file);
        }
        Ok(self.files.get_mut(key).expect("just inserted"))
    }

    /// Forces written lines to stable storage.
    pub fn sync(&mut self) -> io::Result<()> {
        for key in self.dirty.drain() {
            if let Some(f) = self.files.get(&key) {
                f.sync_data()?;
            }
        }
        self.unsynced = 0;
        self.last_sync = Instant::now();
        Ok(())
    }
}

/// Consumes `dest` into `options.out_dir` until `stop` fires.
pub async fn run_sink(
    manager: &Arc<ConnectionManager>,
    tree: &ConfigTree,
    dest: &str,
    options: SinkOptions,
    stop: CancellationToken,
) -> Result<SinkStats, MqError> {
    let interval = options.sync_interval;
    let writer = Arc::new(Mutex::new(
        SinkWriter::open(options).map_err(|e| MqError::SendFailed(format!("sink output: {e}")))?,
    ));
    let handler_writer = Arc::clone(&writer);
    let handler = move |d: &Delivery| -> Result<(), HandlerError> {
        let mut w = handler_writer.lock();
        match w.write(&d.envelope) {
            Ok(_) => Ok(()),
            Err(e) => {
                warn!(error = %e, message_id = %d.envelope.message_id, "sink write failed");
                Err(HandlerError::failed(e.to_string()))
            }
        }
    };
    let consumer = create_consumer(
        manager,
        tree,
        dest,
        DeliveryMode::callback(handler),
        ConsumerOptions::default(),
    )
    .await?;
    info!(dest, "sink running");
    let mut ticker = tokio::time::interval(interval);
    loop {
        tokio::select! {
            _ = stop.cancelled() => break,
            _ = ticker.tick() => {
                if let Err(e) = writer.lock().sync() {
                    warn!(error = %e, "sink sync failed");
                }
            }
        }
    }
    consumer.close().await;
    let mut w = writer.lock();
    if let Err(e) = w.sync() {
        warn!(error = %e, "final sink sync failed");
    }
    Ok(w.stats())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{make_envelope, FixedClock};
    use serde_json::json;

    const UUID: &str = "0f8fad5b-d9cb-469f-a165-70867728950e";

    fn record(n: u64) -> MessageEnvelope {
        let payload = json!({
            "pilot_uuid": UUID, "timestamp": "2024-01-02T03:04:05Z", "message": format!("line {n}"),
            "phase": "run", "severity": "INFO", "source": "ce1", "received_at_ms": n, "principal": "pilots"
        });
        make_envelope(payload, "gw", "/queue/logs", &FixedClock(n))
    }

    fn lines(path: &Path) -> Vec<Value> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn writes_one_file_per_pilot_with_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = SinkWriter::open(SinkOptions::new(dir.path())).unwrap();
        let envs: Vec<_> = (0..3).map(record).collect();
        for e in &envs {
            assert_eq!(w.write(e).unwrap(), WriteOutcome::Written);
        }
        let got = lines(&dir.path().join(format!("{UUID}.log")));
        assert_eq!(got.len(), 3);
        assert_eq!(got[2]["message"], "line 2");
        assert_eq!(got[2]["message_id"], envs[2].message_id.as_str());
        assert_eq!(got[2]["principal"], "pilots");
    }

    #[test]
    fn duplicate_ids_are_not_written_twice() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = SinkWriter::open(SinkOptions::new(dir.path())).unwrap();
        let e = record(1);
        w.write(&e).unwrap();
        assert_eq!(w.write(&e).unwrap(), WriteOutcome::Duplicate);
        assert_eq!(lines(&dir.path().join(format!("{UUID}.log"))).len(), 1);
        assert_eq!(w.stats().duplicates, 1);
    }

    #[test]
    fn dedup_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let e = record(1);
        {
            let mut w = SinkWriter::open(SinkOptions::new(dir.path())).unwrap();
            w.write(&e).unwrap();
        }
        let mut w = SinkWriter::open(SinkOptions::new(dir.path())).unwrap();
        assert_eq!(w.write(&e).unwrap(), WriteOutcome::Duplicate);
        assert_eq!(w.write(&record(2)).unwrap(), WriteOutcome::Written);
    }

    #[test]
    fn missing_or_unsafe_pilot_goes_to_quarantine() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = SinkWriter::open(SinkOptions::new(dir.path())).unwrap();
        let missing = make_envelope(json!({"message": "x"}), "gw", "/queue/logs", &FixedClock(1));
        let unsafe_id = make_envelope(json!({"pilot_uuid": "../x", "message": "x"}), "gw", "/queue/logs", &FixedClock(1));
        assert_eq!(w.write(&missing).unwrap(), WriteOutcome::Quarantined);
        assert_eq!(w.write(&unsafe_id).unwrap(), WriteOutcome::Quarantined);
        let got = lines(&dir.path().join(MALFORMED_FILE));
        assert_eq!(got.len(), 2);
        assert_eq!(got[0]["payload"], json!({"message": "x"}));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn window_evicts_oldest() {
        let mut w = DedupWindow::new(2);
        assert!(w.insert("a"));
        assert!(w.insert("b"));
        assert!(!w.insert("a"));
        assert!(w.insert("c"));
        assert!(!w.contains("a"));
        assert!(w.contains("b") && w.contains("c"));
        assert_eq!(w.len(), 2);
    }
}
