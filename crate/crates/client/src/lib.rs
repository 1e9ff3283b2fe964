//! Pilot side of the log pipeline.
//!
//! [`ship_logs`] reads a log file or standard input line by line and sends
//! the records either to the HTTP gateway ([`GatewayTransport`]) or straight
//! to a queue through a spooled producer.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use mqware::api::{create_producer, MqError, ProducerOptions};
use mqware::config::ConfigTree;
use mqware::manager::ConnectionManager;
use mqware::pipeline::{ship_file, ship_lines, LogTransport, MqTransport, PilotIdentity, PilotLogRecord, ShipError, ShipOptions, ShipReport};
use mqware::spool::{FailoverSpool, Spool, SpoolError};
use serde_json::Value;
use tokio::io::BufReader;

pub const DEFAULT_HTTP_TIMEOUT: Duration = Duration::from_secs(30);

/// Posts batches as JSON arrays to `<base>/v1/logs`.
pub struct GatewayTransport {
    http: reqwest::Client,
    base: String,
    token: String,
}

impl GatewayTransport {
    pub fn new(base_url: &str, token: impl Into<String>) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .timeout(DEFAULT_HTTP_TIMEOUT)
            .build()
            .map_err(|e| ClientError::Http(e.to_string()))?;
        Ok(GatewayTransport {
            http,
            base: base_url.trim_end_matches('/').to_string(),
            token: token.into(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// `GET /v1/health`.
    pub async fn health(&self) -> Result<Value, ClientError> {
        let resp = self.http.get(self.url("/v1/health")).send().await.map_err(|e| ClientError::Http(e.to_string()))?;
        resp.json().await.map_err(|e| ClientError::Http(e.to_string()))
    }
}

#[async_trait]
impl LogTransport for GatewayTransport {
    async fn send(&mut self, batch: &[PilotLogRecord]) -> Result<(), String> {
        let body = Value::Array(batch.iter().map(PilotLogRecord::to_json).collect());
        let resp = self
            .http
            .post(self.url("/v1/logs"))
            .bearer_auth(&self.token)
            .json(&body)
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if status == reqwest::StatusCode::ACCEPTED {
            return Ok(());
        }
        let detail = resp.text().await.unwrap_or_default();
        Err(format!("gateway answered {status}: {detail}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("http client: {0}")]
    Http(String),
    #[error(transparent)]
    Ship(#[from] ShipError),
    #[error(transparent)]
    Mq(#[from] MqError),
    #[error("spool: {0}")]
    Spool(#[from] SpoolError),
}

pub enum LogSource {
    File(PathBuf),
    Stdin,
}

pub enum ShipTarget {
    Gateway {
        base_url: String,
        token: String,
    },
    /// Put on a queue directly; with a spool directory the records survive
    /// broker outages.
    Queue {
        manager: Arc<ConnectionManager>,
        tree: ConfigTree,
        destination: String,
        spool_dir: Option<PathBuf>,
        principal: String,
    },
}

async fn ship_from<T: LogTransport + ?Sized>(
    source: &LogSource,
    identity: &PilotIdentity,
    transport: &mut T,
    options: &ShipOptions,
) -> Result<ShipReport, ShipError> {
    match source {
        LogSource::File(path) => ship_file(Path::new(path), identity, transport, options).await,
        LogSource::Stdin => ship_lines(BufReader::new(tokio::io::stdin()), identity, transport, options).await,
    }
}

/// Ships `source` to end of stream and reports how much went out.
pub async fn ship_logs(
    source: &LogSource,
    target: ShipTarget,
    identity: &PilotIdentity,
    options: &ShipOptions,
) -> Result<ShipReport, ClientError> {
    match target {
        ShipTarget::Gateway { base_url, token } => {
            let mut transport = GatewayTransport::new(&base_url, token)?;
            Ok(ship_from(source, identity, &mut transport, options).await?)
        }
        ShipTarget::Queue {
            manager,
            tree,
            destination,
            spool_dir,
            principal,
        } => {
            let producer_options = match spool_dir {
                Some(dir) => ProducerOptions::with_spool(FailoverSpool::new(Spool::open(dir, Default::default())?)),
                None => ProducerOptions {
                    confirm: true,
                    ..Default::default()
                },
            };
            let producer = create_producer(&manager, &tree, &destination, producer_options).await?;
            let mut transport = MqTransport::new(producer, principal);
            let result = ship_from(source, identity, &mut transport, options).await;
            drain_before_close(&transport).await;
            transport.close().await;
            Ok(result?)
        }
    }
}

/// Gives a spooled backlog a bounded chance to go out before exiting.
async fn drain_before_close(transport: &MqTransport) {
    use mqware::connector::Session;
    let Some(spool) = transport.producer().spool() else {
        return;
    };
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while spool.depth() > 0 && tokio::time::Instant::now() < deadline {
        if transport.producer().session().is_connected() {
            let _ = spool.drain(transport.producer().session().as_ref()).await;
        } else {
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_ignore_trailing_slashes() {
        let t = GatewayTransport::new("http://gw.example:8080//", "t").unwrap();
        assert_eq!(t.url("/v1/logs"), "http://gw.example:8080/v1/logs");
        assert_eq!(t.url("/v1/health"), "http://gw.example:8080/v1/health");
    }

    #[tokio::test]
    async fn unreachable_gateway_is_an_error_not_a_panic() {
        let mut t = GatewayTransport::new("http://127.0.0.1:1", "t").unwrap();
        let record = PilotLogRecord::new("0f8fad5b-d9cb-469f-a165-70867728950e", "2024-01-01T00:00:00Z", "x");
        assert!(t.send(&[record]).await.is_err());
        assert!(t.health().await.is_err());
    }
}
