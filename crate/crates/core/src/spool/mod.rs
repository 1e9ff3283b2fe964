//! Disk-backed spool for messages that could not be delivered.
//!
//! Record layout, little-endian:
//!
//! ```text
//! "MQSP" | version u8 = 1 | seq u64 | enqueued_ms u64 | path_len u16 | path
//!        | body_len u32 | body | crc32c u32 (over every preceding byte)
//! ```
//!
//! Records live in segment files `spool-<first seq, 20 digits>.dat`. The
//! sidecar `cursor.json` holds `{"last_replayed_seq": n}` and is replaced
//! atomically after every acknowledged replay batch.

mod failover;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use tracing::{debug, warn};

use crate::connector::{Session, SessionError};
use crate::message::{canonical_json, now_ms, MessageEnvelope};

pub use failover::{FailoverError, FailoverSpool};

pub const MAGIC: &[u8; 4] = b"MQSP";
pub const VERSION: u8 = 1;
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;
pub const REPLAY_BATCH: usize = 100;
pub const CURSOR_FILE: &str = "cursor.json";

const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 2;

#[derive(Debug, thiserror::Error)]
pub enum SpoolError {
    #[error("spool is full: {0}")]
    DiskFull(String),
    #[error("spool I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("replay failed after {replayed} entries: {source}")]
    SendFailed {
        replayed: usize,
        #[source]
        source: SessionError,
    },
    #[error("invalid spool entry: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct SpoolOptions {
    /// A segment is closed once it reaches this size.
    pub segment_bytes: u64,
    /// Total on-disk budget; appends beyond it fail with `DiskFull`.
    pub max_total_bytes: Option<u64>,
}

impl Default for SpoolOptions {
    fn default() -> Self {
        SpoolOptions {
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            max_total_bytes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpoolCounters {
    pub appended: u64,
    pub replayed: u64,
    pub dropped_corrupt: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpoolEntry {
    pub seq: u64,
    pub enqueued_ms: u64,
    pub wire_path: String,
    pub envelope: MessageEnvelope,
}

/// Serializes an envelope for storage: canonical JSON of the payload and
/// all transport headers.
pub fn envelope_bytes(env: &MessageEnvelope) -> Vec<u8> {
    let mut obj = Map::new();
    obj.insert("destination".into(), Value::String(env.destination.clone()));
    obj.insert("message-id".into(), Value::String(env.message_id.clone()));
    obj.insert("origin".into(), Value::String(env.origin.clone()));
    obj.insert("payload".into(), env.payload.clone());
    obj.insert("timestamp-ms".into(), Value::from(env.timestamp_ms));
    canonical_json(&Value::Object(obj))
}

pub fn envelope_from_bytes(bytes: &[u8]) -> Result<MessageEnvelope, SpoolError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| SpoolError::Invalid(e.to_string()))?;
    let field = |k: &str| value.get(k).ok_or_else(|| SpoolError::Invalid(format!("missing {k}")));
    let text = |k: &str| -> Result<String, SpoolError> {
        field(k)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| SpoolError::Invalid(format!("{k} is not a string")))
    };
    Ok(MessageEnvelope {
        payload: field("payload")?.clone(),
        message_id: text("message-id")?,
        timestamp_ms: field("timestamp-ms")?
            .as_u64()
            .ok_or_else(|| SpoolError::Invalid("timestamp-ms is not an integer".into()))?,
        destination: text("destination")?,
        origin: text("origin")?,
    })
}

pub fn encode_record(seq: u64, enqueued_ms: u64, wire_path: &str, body: &[u8]) -> Result<Vec<u8>, SpoolError> {
    let path_len = u16::try_from(wire_path.len()).map_err(|_| SpoolError::Invalid("wire path too long".into()))?;
    let body_len = u32::try_from(body.len()).map_err(|_| SpoolError::Invalid("envelope too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + wire_path.len() + 4 + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&enqueued_ms.to_le_bytes());
    out.extend_from_slice(&path_len.to_le_bytes());
    out.extend_from_slice(wire_path.as_bytes());
    out.extend_from_slice(&body_len.to_le_bytes());
    out.extend_from_slice(body);
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct RawRecord {
    seq: u64,
    enqueued_ms: u64,
    wire_path: String,
    body: Vec<u8>,
}

/// Parses one record at the start of `buf`. `None` means torn or corrupt.
fn decode_record(buf: &[u8]) -> Option<(RawRecord, usize)> {
    if buf.len() < HEADER_LEN || &buf[..4] != MAGIC || buf[4] != VERSION {
        return None;
    }
    let u64_at = |at: usize| u64::from_le_bytes(buf[at..at + 8].try_into().unwrap());
    let seq = u64_at(5);
    let enqueued_ms = u64_at(13);
    let path_len = u16::from_le_bytes([buf[21], buf[22]]) as usize;
    let mut pos = HEADER_LEN;
    let path = buf.get(pos..pos + path_len)?;
    pos += path_len;
    let body_len = u32::from_le_bytes(buf.get(pos..pos + 4)?.try_into().unwrap()) as usize;
    pos += 4;
    let body = buf.get(pos..pos + body_len)?;
    pos += body_len;
    let stored = u32::from_le_bytes(buf.get(pos..pos + 4)?.try_into().unwrap());
    if crc32c::crc32c(&buf[..pos]) != stored {
        return None;
    }
    let wire_path = std::str::from_utf8(path).ok()?.to_string();
    Some((
        RawRecord {
            seq,
            enqueued_ms,
            wire_path,
            body: body.to_vec(),
        },
        pos + 4,
    ))
}

pub fn segment_name(first_seq: u64) -> String {
    format!("spool-{first_seq:020}.dat")
}

fn parse_segment_name(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("spool-")?.strip_suffix(".dat")?;
    if digits.len() != 20 {
        return None;
    }
    digits.parse().ok()
}

#[derive(Debug, Clone)]
struct Segment {
    path: PathBuf,
    last_seq: Option<u64>,
    bytes: u64,
    /// Valid records with seq at or after the cursor.
    pending: u64,
}

pub struct Spool {
    dir: PathBuf,
    options: SpoolOptions,
    segments: BTreeMap<u64, Segment>,
    active: Option<(u64, File)>,
    next_seq: u64,
    cursor: u64,
    counters: SpoolCounters,
}

impl std::fmt::Debug for Spool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spool")
            .field("dir", &self.dir)
            .field("next_seq", &self.next_seq)
            .field("cursor", &self.cursor)
            .field("pending", &self.pending())
            .finish()
    }
}

/// Opens the spool in `dir` with default options.
pub fn recover(dir: impl AsRef<Path>) -> Result<Spool, SpoolError> {
    Spool::open(dir, SpoolOptions::default())
}

impl Spool {
    /// Scans existing segments, dropping the first bad record of a segment
    /// and everything after it, and resumes after the persisted cursor.
    pub fn open(dir: impl AsRef<Path>, options: SpoolOptions) -> Result<Spool, SpoolError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let last_replayed = read_cursor(&dir)?;
        let cursor = last_replayed + 1;

        let mut names: Vec<(u64, PathBuf)> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                Some((parse_segment_name(&name)?, e.path()))
            })
            .collect();
        names.sort();

        let mut counters = SpoolCounters::default();
        let mut segments = BTreeMap::new();
        let mut max_seq = last_replayed;
        for (first, path) in names {
            let mut data = Vec::new();
            File::open(&path)?.read_to_end(&mut data)?;
            let mut pos = 0;
            let mut last_seq = None;
            let mut pending = 0;
            while pos < data.len() {
                match decode_record(&data[pos..]) {
                    Some((rec, used)) if last_seq.map_or(rec.seq == first, |l| rec.seq > l) => {
                        if rec.seq >= cursor {
                            pending += 1;
                        }
                        last_seq = Some(rec.seq);
                        max_seq = max_seq.max(rec.seq);
                        pos += used;
                    }
                    _ => break,
                }
            }
            if pos < data.len() {
                counters.dropped_corrupt += 1;
                warn!(segment = %path.display(), offset = pos, "discarding corrupt spool tail");
                OpenOptions::new().write(true).open(&path)?.set_len(pos as u64)?;
            }
            if last_seq.is_none() || pending == 0 {
                fs::remove_file(&path)?;
                continue;
            }
            segments.insert(
                first,
                Segment {
                    path,
                    last_seq,
                    bytes: pos as u64,
                    pending,
                },
            );
        }

        let spool = Spool {
            dir,
            options,
            segments,
            active: None,
            next_seq: max_seq + 1,
            cursor,
            counters,
        };
        debug!(?spool, "spool recovered");
        Ok(spool)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Seq of the next entry to replay.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn counters(&self) -> SpoolCounters {
        self.counters
    }

    /// Entries appended but not yet replayed.
    pub fn pending(&self) -> u64 {
        self.segments.values().map(|s| s.pending).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pending() == 0
    }

    pub fn segment_files(&self) -> Vec<PathBuf> {
        self.segments.values().map(|s| s.path.clone()).collect()
    }

    fn total_bytes(&self) -> u64 {
        self.segments.values().map(|s| s.bytes).sum()
    }

    /// Writes one entry and hands it to the operating system before returning.
    pub fn append(&mut self, wire_path: &str, env: &MessageEnvelope) -> Result<u64, SpoolError> {
        let seq = self.next_seq;
        let record = encode_record(seq, now_ms(), wire_path, &envelope_bytes(env))?;
        if let Some(limit) = self.options.max_total_bytes {
            if self.total_bytes() + record.len() as u64 > limit {
                return Err(SpoolError::DiskFull(format!("spool budget of {limit} bytes exhausted")));
            }
        }
        let rotate = match &self.active {
            Some((first, _)) => self.segments[first].bytes >= self.options.segment_bytes,
            None => true,
        };
        if rotate {
            let path = self.dir.join(segment_name(seq));
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            self.segments.insert(
                seq,
                Segment {
                    path,
                    last_seq: None,
                    bytes: 0,
                    pending: 0,
                },
            );
            self.active = Some((seq, file));
        }
        let (first, file) = self.active.as_mut().expect("active segment");
        let segment = self.segments.get_mut(first).expect("active segment entry");
        if let Err(e) = file.write_all(&record) {
            // leave no torn bytes behind for the next append
            let _ = file.set_len(segment.bytes);
            return Err(if is_disk_full(&e) {
                SpoolError::DiskFull(e.to_string())
            } else {
                SpoolError::Io(e)
            });
        }
        segment.bytes += record.len() as u64;
        segment.last_seq = Some(seq);
        segment.pending += 1;
        self.next_seq += 1;
        self.counters.appended += 1;
        Ok(seq)
    }

    /// All entries from the cursor onward, in seq order.
    pub fn pending_entries(&self) -> Result<Vec<SpoolEntry>, SpoolError> {
        let mut out = Vec::new();
        for first in self.segments.keys().copied().collect::<Vec<_>>() {
            out.extend(self.read_segment(first)?);
        }
        Ok(out)
    }

    fn read_segment(&self, first: u64) -> Result<Vec<SpoolEntry>, SpoolError> {
        let segment = &self.segments[&first];
        let mut data = Vec::new();
        File::open(&segment.path)?.read_to_end(&mut data)?;
        data.truncate(segment.bytes as usize);
        let mut out = Vec::new();
        let mut pos = 0;
        while let Some((rec, used)) = decode_record(&data[pos..]) {
            pos += used;
            if rec.seq < self.cursor {
                continue;
            }
            out.push(SpoolEntry {
                seq: rec.seq,
                enqueued_ms: rec.enqueued_ms,
                wire_path: rec.wire_path,
                envelope: envelope_from_bytes(&rec.body)?,
            });
        }
        Ok(out)
    }

    /// Sends pending entries in batches, each confirmed by broker receipts,
    /// persisting the cursor after every batch. Stops at the first failure.
    pub async fn replay(&mut self, session: &dyn Session) -> Result<usize, SpoolError> {
        let mut replayed = 0;
        while let Some(&first) = self.segments.keys().next() {
            let entries = self.read_segment(first)?;
            for batch in entries.chunks(REPLAY_BATCH) {
                let items: Vec<(String, MessageEnvelope)> =
                    batch.iter().map(|e| (e.wire_path.clone(), e.envelope.clone())).collect();
                if let Err(source) = session.put_batch(&items).await {
                    return Err(SpoolError::SendFailed { replayed, source });
                }
                let last = batch.last().expect("non-empty batch").seq;
                write_cursor(&self.dir, last)?;
                self.cursor = last + 1;
                replayed += batch.len();
                self.counters.replayed += batch.len() as u64;
                let segment = self.segments.get_mut(&first).expect("segment");
                segment.pending -= batch.len() as u64;
            }
            let segment = self.segments.remove(&first).expect("segment");
            if self.active.as_ref().is_some_and(|(a, _)| *a == first) {
                self.active = None;
            }
            fs::remove_file(&segment.path)?;
        }
        Ok(replayed)
    }
}

fn is_disk_full(e: &io::Error) -> bool {
    e.kind() == io::ErrorKind::StorageFull || e.raw_os_error() == Some(28)
}

fn read_cursor(dir: &Path) -> Result<u64, SpoolError> {
    let path = dir.join(CURSOR_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e.into()),
    };
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| SpoolError::Invalid(format!("{}: {e}", path.display())))?;
    value
        .get("last_replayed_seq")
        .and_then(Value::as_u64)
        .ok_or_else(|| SpoolError::Invalid(format!("{}: missing last_replayed_seq", path.display())))
}

fn write_cursor(dir: &Path, last_replayed: u64) -> Result<(), SpoolError> {
    let tmp = dir.join(format!("{CURSOR_FILE}.tmp"));
    let mut file = File::create(&tmp)?;
    file.write_all(format!("{{\"last_replayed_seq\":{last_replayed}}}").as_bytes())?;
    file.sync_data()?;
    fs::rename(&tmp, dir.join(CURSOR_FILE))?;
    Ok(())
}
