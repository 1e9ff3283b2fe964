use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use mqware::api::{create_consumer, create_producer, ConsumerOptions, DeliveryMode, MqError, ProducerOptions};
use mqware::config::{resolve, resolve_secret, validate, ConfigError, ConfigTree};
use mqware::connector::{Backoff, ConnectorRegistry, HandlerError};
use mqware::manager::ConnectionManager;
use mqware::message::{canonical_json, MessageEnvelope};
use mqware::pipeline::{run_sink, PilotIdentity, ShipError, ShipOptions, SinkOptions};
use mqware_broker::BrokerConfig;
use mqware_client::{ship_logs, ClientError, LogSource, ShipTarget};
use mqware_gateway::{GatewayConfig, GatewayError, TokenEntry};
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;
use tracing::warn;

use crate::cli::{BrokerArgs, Cli, Command, ConsumeArgs, GatewayArgs, HashTokenArgs, ProduceArgs, ShipArgs, SinkArgs};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Connect(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Connect(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Connect(m) => write!(f, "connection error: {m}"),
            Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<MqError> for Failure {
    fn from(e: MqError) -> Self {
        match e {
            MqError::Config(c) => Failure::Config(c.to_string()),
            MqError::InvalidJson(m) => Failure::Config(format!("invalid JSON payload: {m}")),
            e @ (MqError::Connect(_) | MqError::SendFailed(_) | MqError::Subscribe(_)) => {
                Failure::Connect(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(m) => Failure::Config(m),
            GatewayError::Mq(m) => m.into(),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Mq(m) => m.into(),
            ClientError::Ship(ShipError::Delivery { .. }) => Failure::Connect(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

pub async fn run(cli: Cli) -> Outcome {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Produce(args) => produce(config, args).await,
        Command::Consume(args) => consume(config, args).await,
        Command::Broker(args) => broker(config, args).await,
        Command::Gateway(args) => gateway(config, args).await,
        Command::ShipLogs(args) => ship(config, args).await,
        Command::Sink(args) => sink(config, args).await,
        Command::HashToken(args) => hash_token(args),
        Command::Validate => check(config),
    }
}

fn load_tree(path: Option<&Path>) -> Result<ConfigTree, Failure> {
    let path = path.ok_or_else(|| Failure::Config("no config file given (use --config or MQCONFIG)".into()))?;
    let tree = ConfigTree::from_path(path)?;
    let violations = validate(&tree);
    if let Some(first) = violations.first() {
        return Err(Failure::Config(format!("{first} ({} violation(s), see `mqctl validate`)", violations.len())));
    }
    Ok(tree)
}

fn manager() -> Arc<ConnectionManager> {
    ConnectionManager::new(ConnectorRegistry::default())
}

/// Resolves on Ctrl-C or SIGTERM.
async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

async fn produce(config: Option<&Path>, args: ProduceArgs) -> Outcome {
    let tree = load_tree(config)?;
    resolve(&tree, &args.dest)?;
    let text = match args.message {
        Some(m) => m,
        None => {
            let mut buf = String::new();
            std::io::stdin()
                .read_to_string(&mut buf)
                .map_err(|e| Failure::Runtime(format!("cannot read stdin: {e}")))?;
            buf
        }
    };
    let payload: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("message is not valid JSON: {e}")))?;
    let mgr = manager();
    let producer = create_producer(
        &mgr,
        &tree,
        &args.dest,
        ProducerOptions {
            confirm: true,
            ..Default::default()
        },
    )
    .await?;
    let result = producer.put(payload).await;
    producer.close().await;
    result?;
    Ok(())
}

fn envelope_line(env: &MessageEnvelope, whole: bool) -> Vec<u8> {
    if whole {
        mqware::spool::envelope_bytes(env)
    } else {
        canonical_json(&env.payload)
    }
}

async fn consume(config: Option<&Path>, args: ConsumeArgs) -> Outcome {
    let tree = load_tree(config)?;
    let resolved = resolve(&tree, &args.dest)?;
    if args.count == Some(0) {
        return Ok(());
    }
    let mgr = manager();
    let (tx, mut rx) = mpsc::unbounded_channel::<MessageEnvelope>();
    let taken = Arc::new(AtomicU64::new(0));
    let limit = args.count;
    let handler = move |d: &mqware::connector::Delivery| -> Result<(), HandlerError> {
        // past the limit, leave messages for the next consumer
        if limit.is_some_and(|n| taken.fetch_add(1, Ordering::SeqCst) >= n) {
            return Err(HandlerError::Deferred);
        }
        tx.send(d.envelope.clone()).map_err(|_| HandlerError::Deferred)
    };
    let mut backoff = Backoff::new(resolved.service.reconnect, true);
    let consumer = loop {
        let mode = DeliveryMode::callback(handler.clone());
        match create_consumer(&mgr, &tree, &args.dest, mode, ConsumerOptions::default()).await {
            Ok(c) => break c,
            Err(MqError::Connect(e)) if !args.no_retry => {
                let delay = backoff.next_delay();
                warn!(error = %e, ?delay, "cannot connect, retrying");
                tokio::select! {
                    _ = tokio::time::sleep(delay) => {}
                    _ = shutdown_signal() => return Ok(()),
                }
            }
            Err(e) => return Err(e.into()),
        }
    };

    let mut printed = 0u64;
    let stdout = std::io::stdout();
    let outcome = loop {
        let env = tokio::select! {
            env = rx.recv() => env,
            _ = shutdown_signal() => break Ok(()),
        };
        let Some(env) = env else { break Ok(()) };
        let mut line = envelope_line(&env, args.envelope);
        line.push(b'\n');
        let mut out = stdout.lock();
        if out.write_all(&line).and_then(|()| out.flush()).is_err() {
            break Ok(());
        }
        printed += 1;
        if args.count.is_some_and(|n| printed >= n) {
            break Ok(());
        }
    };
    consumer.close().await;
    outcome
}

async fn broker(config: Option<&Path>, args: BrokerArgs) -> Outcome {
    let mut cfg = match config {
        Some(p) => BrokerConfig::from_path(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => BrokerConfig::default(),
    };
    if let Some(listen) = args.listen {
        cfg.listen = Some(listen);
    }
    let handle = mqware_broker::start(cfg).await.map_err(|e| match e {
        mqware_broker::BrokerError::Config(m) | mqware_broker::BrokerError::Tls(m) => Failure::Config(m),
        other => Failure::Runtime(other.to_string()),
    })?;
    if let Some(a) = handle.addr() {
        eprintln!("broker listening on tcp://{a}");
    }
    if let Some(a) = handle.tls_addr() {
        eprintln!("broker listening on tls://{a}");
    }
    shutdown_signal().await;
    handle.shutdown().await;
    Ok(())
}

async fn gateway(config: Option<&Path>, args: GatewayArgs) -> Outcome {
    let tree = load_tree(config)?;
    let path = config.expect("load_tree checked the path");
    let mut cfg = GatewayConfig::from_path(path)?;
    if let Some(listen) = args.listen {
        cfg.listen = listen;
    }
    resolve(&tree, &cfg.destination)?;
    if cfg.tokens.is_empty() {
        warn!("Gateway.Tokens is empty: every request will be rejected");
    }
    let mgr = manager();
    let handle = mqware_gateway::start(&cfg, &mgr, &tree).await?;
    eprintln!("gateway listening on {}", handle.base_url());
    shutdown_signal().await;
    handle.shutdown().await;
    Ok(())
}

fn host_label() -> String {
    mqware::api::default_origin()
}

async fn ship(config: Option<&Path>, args: ShipArgs) -> Outcome {
    let pilot_uuid = args
        .pilot_uuid
        .or_else(|| std::env::var("PILOT_UUID").ok())
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    if !mqware::pipeline::record::is_valid_pilot_uuid(&pilot_uuid) {
        return Err(Failure::Config(format!("pilot uuid {pilot_uuid:?} is not a hyphenated UUID")));
    }
    let identity = PilotIdentity {
        pilot_uuid,
        source: args.source_label.unwrap_or_else(host_label),
    };
    let options = ShipOptions {
        batch_size: args.batch_size.max(1),
        batch_interval: Duration::from_millis(args.batch_interval_ms),
        ..Default::default()
    };
    let source = if args.source == "-" {
        LogSource::Stdin
    } else {
        LogSource::File(args.source.into())
    };
    let target = match (args.gateway, args.dest) {
        (Some(base_url), _) => {
            let reference = args
                .token_ref
                .ok_or_else(|| Failure::Config("--gateway needs --token-ref".into()))?;
            ShipTarget::Gateway {
                base_url,
                token: resolve_secret(&reference)?,
            }
        }
        (None, Some(destination)) => {
            let tree = load_tree(config)?;
            resolve(&tree, &destination)?;
            ShipTarget::Queue {
                manager: manager(),
                tree,
                destination,
                spool_dir: args.spool_dir,
                principal: format!("pilot:{}", identity.source),
            }
        }
        (None, None) => return Err(Failure::Config("give --gateway or --dest".into())),
    };
    let report = ship_logs(&source, target, &identity, &options).await?;
    eprintln!("shipped {} record(s) in {} batch(es)", report.shipped, report.batches);
    Ok(())
}

async fn sink(config: Option<&Path>, args: SinkArgs) -> Outcome {
    let tree = load_tree(config)?;
    resolve(&tree, &args.dest)?;
    let stop = CancellationToken::new();
    let trigger = stop.clone();
    tokio::spawn(async move {
        shutdown_signal().await;
        trigger.cancel();
    });
    let mgr = manager();
    let stats = run_sink(&mgr, &tree, &args.dest, SinkOptions::new(&args.out), stop).await?;
    eprintln!(
        "{}",
        serde_json::json!({
            "written": stats.written, "duplicates": stats.duplicates,
            "quarantined": stats.quarantined, "failures": stats.failures,
        })
    );
    Ok(())
}

fn hash_token(args: HashTokenArgs) -> Outcome {
    let token = resolve_secret(&args.token_ref)?;
    if token.is_empty() {
        return Err(Failure::Config("token is empty".into()));
    }
    let entry = TokenEntry::issue(args.principal, &token);
    println!("{}", serde_json::to_string(&entry).expect("serializable"));
    Ok(())
}

fn check(config: Option<&Path>) -> Outcome {
    let path = config.ok_or_else(|| Failure::Config("no config file given (use --config or MQCONFIG)".into()))?;
    let tree = ConfigTree::from_path(path)?;
    let violations = validate(&tree);
    for v in &violations {
        println!("{v}");
    }
    if !violations.is_empty() {
        return Err(Failure::Config(format!("{} violation(s)", violations.len())));
    }
    if let Err(e) = BrokerConfig::from_path(path).and_then(|b| b.validate()) {
        return Err(Failure::Config(e.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(e.to_string()))?;
    if text.contains("\"Gateway\"") {
        let gw = GatewayConfig::from_path(path)?;
        resolve(&tree, &gw.destination)?;
    }
    println!("ok: {} service(s)", tree.services.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(Failure::from(MqError::Config(ConfigError::UnknownService("x".into()))).code(), 2);
        assert_eq!(
            Failure::from(MqError::Connect(mqware::connector::ConnectError::ConnectionRefused("x".into()))).code(),
            3
        );
        assert_eq!(Failure::from(MqError::ProducerClosed).code(), 1);
        assert_eq!(Failure::from(MqError::InvalidJson("x".into())).code(), 2);
    }
}
