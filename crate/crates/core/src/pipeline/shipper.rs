//! Pilot side of the log pipeline: wraps raw output lines as records and
//! sends them in batches.

use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use tokio::io::{AsyncBufRead, AsyncBufReadExt, BufReader};
use tokio::time::Instant;
use tracing::{debug, warn};

use super::record::{parse_line, utc_now_rfc3339, PilotLogRecord};
use crate::api::Producer;
use crate::message::now_ms;

#[derive(Debug, thiserror::Error)]
pub enum ShipError {
    #[error("cannot read log source: {0}")]
    SourceUnreadable(String),
    #[error("delivery failed after {attempts} attempts: {message}")]
    Delivery { attempts: u32, message: String },
}

/// Where batches go: the HTTP gateway or a queue producer.
#[async_trait]
pub trait LogTransport: Send {
    async fn send(&mut self, batch: &[PilotLogRecord]) -> Result<(), String>;
}

#[derive(Debug, Clone)]
pub struct PilotIdentity {
    pub pilot_uuid: String,
    /// Host or CE label.
    pub source: String,
}

#[derive(Debug, Clone)]
pub struct ShipOptions {
    pub batch_size: usize,
    pub batch_interval: Duration,
    pub attempts: u32,
    pub retry_backoff: Duration,
}

impl Default for ShipOptions {
    fn default() -> Self {
        ShipOptions {
            batch_size: 50,
            batch_interval: Duration::from_secs(2),
            attempts: 5,
            retry_backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShipReport {
    pub shipped: u64,
    pub batches: u64,
}

/// Reads `reader` to end of stream. A batch goes out when it holds
/// `batch_size` records or its first record is `batch_interval` old.
/// Empty lines are skipped.
pub async fn ship_lines<R, T>(
    reader: R,
    identity: &PilotIdentity,
    transport: &mut T,
    options: &ShipOptions,
) -> Result<ShipReport, ShipError>
where
    R: AsyncBufRead + Unpin,
    T: LogTransport + ?Sized,
{
    let mut reader = reader;
    let mut report = ShipReport::default();
    let mut batch: Vec<PilotLogRecord> = Vec::new();
    let mut deadline: Option<Instant> = None;
    let mut buf = Vec::new();
    loop {
        let read = match deadline {
            Some(at) => tokio::time::timeout_at(at, reader.read_until(b'\n', &mut buf)).await.ok(),
            None => Some(reader.read_until(b'\n', &mut buf).await),
        };
        match read {
            None => {
                flush(&mut batch, transport, options, &mut report).await?;
                deadline = None;
            }
            Some(Err(e)) => return Err(ShipError::SourceUnreadable(e.to_string())),
            Some(Ok(0)) => {
                flush(&mut batch, transport, options, &mut report).await?;
                return Ok(report);
            }
            Some(Ok(_)) => {
                let text = String::from_utf8_lossy(&buf).into_owned();
                buf.clear();
                let (phase, severity, message) = parse_line(&text);
                if phase == super::record::DEFAULT_PHASE && message.is_empty() {
                    continue;
                }
                batch.push(PilotLogRecord {
                    pilot_uuid: identity.pilot_uuid.clone(),
                    timestamp: utc_now_rfc3339(),
                    phase,
                    severity,
                    message,
                    source: identity.source.clone(),
                });
                if batch.len() == 1 {
                    deadline = Some(Instant::now() + options.batch_interval);
                }
                if batch.len() >= options.batch_size {
                    flush(&mut batch, transport, options, &mut report).await?;
                    deadline = None;
                }
            }
        }
    }
}

async fn flush<T: LogTransport + ?Sized>(
    batch: &mut Vec<PilotLogRecord>,
    transport: &mut T,
    options: &ShipOptions,
    report: &mut ShipReport,
) -> Result<(), ShipError> {
    if batch.is_empty() {
        return Ok(());
    }
    let mut attempt = 0;
    loop {
        attempt += 1;
        match transport.send(batch).await {
            Ok(()) => break,
            Err(message) if attempt >= options.attempts.max(1) => {
                return Err(ShipError::Delivery { attempts: attempt, message });
            }
            Err(message) => {
                warn!(attempt, %message, "batch delivery failed, retrying");
                tokio::time::sleep(options.retry_backoff * 2u32.pow(attempt - 1)).await;
            }
        }
    }
    debug!(records = batch.len(), "batch shipped");
    report.shipped += batch.len() as u64;
    report.batches += 1;
    batch.clear();
    Ok(())
}

pub async fn ship_file<T: LogTransport + ?Sized>(
    path: &Path,
    identity: &PilotIdentity,
    transport: &mut T,
    options: &ShipOptions,
) -> Result<ShipReport, ShipError> {
    let file = tokio::fs::File::open(path)
        .await
        .map_err(|e| ShipError::SourceUnreadable(format!("{}: {e}", path.display())))?;
    ship_lines(BufReader::new(file), identity, transport, options).await
}

/// Sends records straight to a queue, stamping them the way the gateway
/// would. Attach a spool to the producer to survive broker outages.
pub struct MqTransport {
    producer: Producer,
    principal: String,
}

impl MqTransport {
    pub fn new(producer: Producer, principal: impl Into<String>) -> Self {
        MqTransport {
            producer,
            principal: principal.into(),
        }
    }

    pub fn producer(&self) -> &Producer {
        &self.producer
    }

    pub async fn close(self) {
        self.producer.close().await;
    }
}

#[async_trait]
impl LogTransport for MqTransport {
    async fn send(&mut self, batch: &[PilotLogRecord]) -> Result<(), String> {
        for record in batch {
            self.producer
                .put(record.stamped(now_ms(), &self.principal))
                .await
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}
