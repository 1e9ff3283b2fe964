//! HTTP front door of the pilot-log pipeline.
//!
//! `POST /v1/logs` takes one record or an array of records from a pilot,
//! checks the bearer token, stamps each record with the principal and the
//! receive time, and puts it on the configured destination through a
//! spooled producer. `GET /v1/health` reports broker connectivity and the
//! spool backlog.
//!
//! | status | when |
//! |---|---|
//! | 202 | `{"accepted": n, "spooled": m}` |
//! | 400 | body is not JSON, or a record breaks the schema (`field` names it) |
//! | 401 | missing or unknown token |
//! | 413 | more than `MaxBatch` records, or body over `MaxBodyBytes` |
//! | 507 | spool full while the broker is down |

mod tokens;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mqware::api::{create_producer, MqError, Producer, ProducerOptions, PutOutcome};
use mqware::config::ConfigTree;
use mqware::manager::ConnectionManager;
use mqware::message::now_ms;
use mqware::pipeline::PilotLogRecord;
use mqware::spool::{FailoverSpool, Spool, SpoolError, SpoolOptions};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

pub use crate::tokens::{hash_token, TokenEntry, TokenTable};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_BATCH: usize = 1000;
pub const DEFAULT_MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

fn default_listen() -> SocketAddr {
    DEFAULT_LISTEN.parse().expect("valid default")
}

fn default_max_batch() -> usize {
    DEFAULT_MAX_BATCH
}

fn default_max_body() -> usize {
    DEFAULT_MAX_BODY_BYTES
}

/// The `Gateway` section of the config file.
///
/// ```json
/// "Gateway": {
///   "Listen": "127.0.0.1:8080",
///   "Destination": "broker.local::Queue::pilotlogs",
///   "SpoolDir": "/var/spool/mqware/gateway",
///   "Tokens": [{"Principal": "ce-lyon", "Salt": "9f1c...", "Sha256": "5be2..."}]
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Pseudo-URL the records are put on.
    pub destination: String,
    pub spool_dir: PathBuf,
    #[serde(default)]
    pub spool_max_bytes: Option<u64>,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_max_body")]
    pub max_body_bytes: usize,
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
}

impl GatewayConfig {
    pub fn new(destination: impl Into<String>, spool_dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            listen: default_listen(),
            destination: destination.into(),
            spool_dir: spool_dir.into(),
            spool_max_bytes: None,
            max_batch: DEFAULT_MAX_BATCH,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            tokens: Vec::new(),
        }
    }

    pub fn from_json(value: &Value) -> Result<Self, GatewayError> {
        GatewayConfig::deserialize(value).map_err(|e| GatewayError::Config(format!("Gateway: {e}")))
    }

    /// Reads the `Gateway` section of a config file.
    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let section = doc
            .get("Gateway")
            .ok_or_else(|| GatewayError::Config(format!("{}: no Gateway section", path.display())))?;
        Self::from_json(section)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("gateway config: {0}")]
    Config(String),
    #[error("gateway spool: {0}")]
    Spool(#[from] SpoolError),
    #[error(transparent)]
    Mq(#[from] MqError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

struct AppState {
    tokens: TokenTable,
    producer: Producer,
    max_batch: usize,
    /// Keeps each request's records contiguous on the destination.
    order: tokio::sync::Mutex<()>,
}

/// Routes over an already created producer.
fn router(state: Arc<AppState>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/v1/logs", post(post_logs))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

fn problem(status: StatusCode, body: Value) -> Response {
    let mut resp = (status, Json(body)).into_response();
    if status == StatusCode::UNAUTHORIZED {
        resp.headers_mut()
            .insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
    }
    resp
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
}

async fn post_logs(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(principal) = bearer(&headers).and_then(|t| st.tokens.authenticate(t)) else {
        return problem(StatusCode::UNAUTHORIZED, json!({"error": "missing or unknown bearer token"}));
    };
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return problem(StatusCode::BAD_REQUEST, json!({"error": format!("invalid JSON: {e}")})),
    };
    let records = match value {
        Value::Array(items) => {
            if items.len() > st.max_batch {
                return problem(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    json!({"error": format!("{} records exceed the limit of {}", items.len(), st.max_batch)}),
                );
            }
            let mut records = Vec::with_capacity(items.len());
            for (index, item) in items.iter().enumerate() {
                match PilotLogRecord::from_json(item) {
                    Ok(r) => records.push(r),
                    Err(e) => {
                        return problem(
                            StatusCode::BAD_REQUEST,
                            json!({"error": e.to_string(), "field": e.field, "index": index}),
                        )
                    }
                }
            }
            records
        }
        other => match PilotLogRecord::from_json(&other) {
            Ok(r) => vec![r],
            Err(e) => return problem(StatusCode::BAD_REQUEST, json!({"error": e.to_string(), "field": e.field})),
        },
    };

    let _order = st.order.lock().await;
    let received = now_ms();
    let mut spooled = 0usize;
    for (index, record) in records.iter().enumerate() {
        match st.producer.put(record.stamped(received, principal)).await {
            Ok(PutOutcome::Delivered) => {}
            Ok(PutOutcome::Spooled) => spooled += 1,
            Err(MqError::SpoolFull(m)) => {
                warn!(principal, accepted = index, "spool full, rejecting");
                return problem(
                    StatusCode::INSUFFICIENT_STORAGE,
                    json!({"error": format!("spool full: {m}"), "accepted": index, "spooled": spooled}),
                );
            }
            Err(e) => {
                warn!(principal, error = %e, "forwarding failed");
                return problem(
                    StatusCode::SERVICE_UNAVAILABLE,
                    json!({"error": e.to_string(), "accepted": index, "spooled": spooled}),
                );
            }
        }
    }
    debug!(principal, accepted = records.len(), spooled, "records accepted");
    (StatusCode::ACCEPTED, Json(json!({"accepted": records.len(), "spooled": spooled}))).into_response()
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    use mqware::connector::Session;
    Json(json!({
        "broker_connected": st.producer.session().is_connected(),
        "spool_depth": st.producer.spool().map_or(0, |s| s.depth()),
    }))
}

/// A running gateway.
pub struct GatewayHandle {
    addr: SocketAddr,
    state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

/// Opens the spool, creates the producer (the broker must be reachable at
/// this point) and starts serving.
pub async fn start(
    config: &GatewayConfig,
    manager: &Arc<ConnectionManager>,
    tree: &ConfigTree,
) -> Result<GatewayHandle, GatewayError> {
    let spool = Spool::open(
        &config.spool_dir,
        SpoolOptions {
            max_total_bytes: config.spool_max_bytes,
            ..Default::default()
        },
    )?;
    let producer = create_producer(
        manager,
        tree,
        &config.destination,
        ProducerOptions::with_spool(FailoverSpool::new(spool)),
    )
    .await?;
    let listener = TcpListener::bind(config.listen).await.map_err(|source| GatewayError::Bind {
        addr: config.listen,
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| GatewayError::Bind {
        addr: config.listen,
        source,
    })?;
    let state = Arc::new(AppState {
        tokens: TokenTable::new(config.tokens.clone()),
        producer,
        max_batch: config.max_batch,
        order: tokio::sync::Mutex::new(()),
    });
    let app = router(Arc::clone(&state), config.max_body_bytes);
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let serve = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = stopped.await;
        });
        if let Err(e) = serve.await {
            warn!(error = %e, "gateway server stopped");
        }
    });
    info!(%addr, destination = %config.destination, "gateway listening");
    Ok(GatewayHandle {
        addr,
        state,
        stop: Some(stop),
        task,
    })
}

impl GatewayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn spool_depth(&self) -> u64 {
        self.state.producer.spool().map_or(0, |s| s.depth())
    }

    pub fn producer(&self) -> &Producer {
        &self.state.producer
    }

    /// Stops accepting requests, waits for in-flight ones, then releases
    /// the producer. Spooled records stay on disk for the next start.
    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = (&mut self.task).await;
        self.state.producer.close().await;
    }
}
