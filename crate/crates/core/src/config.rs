//! MQ resource configuration and pseudo-URL destination resolution.
//!
//! A destination is addressed by a pseudo-URL of the form
//! `<service_id>::<Queue|Topic>::<name>`, e.g. `mq.example.org::Queue::Q2`.
//! Every destination must be declared under its service's `Queues` or
//! `Topics` section before it can be resolved.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde_json::{Map, Value};

pub const DEFAULT_PORT: u16 = 61613;
pub const DEFAULT_HEARTBEAT_MS: u64 = 10_000;
pub const DEFAULT_INITIAL_BACKOFF_MS: u64 = 500;
pub const DEFAULT_MAX_BACKOFF_MS: u64 = 30_000;
pub const DEFAULT_BACKOFF_MULTIPLIER: f64 = 2.0;

/// Connector handler names known to the default registry.
pub const BUILTIN_PROTOCOLS: &[&str] = &["stomp", "loopback"];

const SEPARATOR: &str = "::";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("malformed pseudo-url {0:?}: expected <service>::<Queue|Topic>::<name>")]
    MalformedPseudoUrl(String),
    #[error("invalid destination kind {0:?}: expected \"Queue\" or \"Topic\"")]
    InvalidKind(String),
    #[error("unknown MQ service {0:?}")]
    UnknownService(String),
    #[error("destination {0:?} is not declared in the configuration")]
    UndeclaredDestination(String),
    #[error("shorthand {query:?} is ambiguous, candidates: {}", candidates.join(", "))]
    AmbiguousShorthand { query: String, candidates: Vec<String> },
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config schema error at {key}: {message}")]
    Schema { key: String, message: String },
    #[error("secret unavailable: {0}")]
    Secret(String),
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DestinationKind {
    Queue,
    Topic,
}

impl DestinationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DestinationKind::Queue => "Queue",
            DestinationKind::Topic => "Topic",
        }
    }

    /// Default wire-path prefix used by STOMP brokers.
    pub fn path_prefix(self) -> &'static str {
        match self {
            DestinationKind::Queue => "/queue/",
            DestinationKind::Topic => "/topic/",
        }
    }
}

impl fmt::Display for DestinationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DestinationKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Queue" => Ok(DestinationKind::Queue),
            "Topic" => Ok(DestinationKind::Topic),
            other => Err(ConfigError::InvalidKind(other.to_string())),
        }
    }
}

/// A parsed pseudo-URL.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DestinationSpec {
    pub service_id: String,
    pub kind: DestinationKind,
    pub name: String,
}

impl DestinationSpec {
    pub fn new(
        service_id: impl Into<String>,
        kind: DestinationKind,
        name: impl Into<String>,
    ) -> Self {
        DestinationSpec {
            service_id: service_id.into(),
            kind,
            name: name.into(),
        }
    }
}

impl fmt::Display for DestinationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{SEPARATOR}{}{SEPARATOR}{}",
            self.service_id, self.kind, self.name
        )
    }
}

impl FromStr for DestinationSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_pseudo_url(s)
    }
}

/// Splits `service::Kind::name` into its three segments.
pub fn parse_pseudo_url(s: &str) -> Result<DestinationSpec, ConfigError> {
    let segments: Vec<&str> = s.split(SEPARATOR).collect();
    if segments.len() != 3 || segments.iter().any(|seg| seg.is_empty()) {
        return Err(ConfigError::MalformedPseudoUrl(s.to_string()));
    }
    let kind = segments[1].parse()?;
    Ok(DestinationSpec::new(segments[0], kind, segments[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthMode {
    UserPass,
    TlsClientCert,
}

impl AuthMode {
    fn as_str(self) -> &'static str {
        match self {
            AuthMode::UserPass => "UserPass",
            AuthMode::TlsClientCert => "TlsClientCert",
        }
    }
}

/// Credentials for one MQ service.
///
/// `password_ref` is never a literal password. It is either `env:<VAR>` or
/// `file:<path>#<key>`, where the file holds a flat JSON object of secrets.
#[derive(Debug, Clone, PartialEq)]
pub struct AuthConfig {
    pub mode: AuthMode,
    pub user: Option<String>,
    pub password_ref: Option<String>,
    pub cert_path: Option<PathBuf>,
    pub key_path: Option<PathBuf>,
    pub ca_path: Option<PathBuf>,
}

impl AuthConfig {
    pub fn user_pass(user: impl Into<String>, password_ref: impl Into<String>) -> Self {
        AuthConfig {
            mode: AuthMode::UserPass,
            user: Some(user.into()),
            password_ref: Some(password_ref.into()),
            cert_path: None,
            key_path: None,
            ca_path: None,
        }
    }

    pub fn tls_client_cert(
        cert_path: impl Into<PathBuf>,
        key_path: impl Into<PathBuf>,
        ca_path: impl Into<PathBuf>,
    ) -> Self {
        AuthConfig {
            mode: AuthMode::TlsClientCert,
            user: None,
            password_ref: None,
            cert_path: Some(cert_path.into()),
            key_path: Some(key_path.into()),
            ca_path: Some(ca_path.into()),
        }
    }

    /// Looks up the password behind `password_ref`.
    pub fn resolve_password(&self) -> Result<String, ConfigError> {
        match &self.password_ref {
            Some(reference) => resolve_secret(reference),
            None => Err(ConfigError::Secret("no password reference configured".into())),
        }
    }
}

enum SecretRef<'a> {
    Env(&'a str),
    File { path: &'a str, key: &'a str },
}

fn parse_secret_ref(reference: &str) -> Option<SecretRef<'_>> {
    if let Some(var) = reference.strip_prefix("env:") {
        return (!var.is_empty()).then_some(SecretRef::Env(var));
    }
    let rest = reference.strip_prefix("file:")?;
    let (path, key) = rest.rsplit_once('#')?;
    (!path.is_empty() && !key.is_empty()).then_some(SecretRef::File { path, key })
}

/// Resolves an `env:` or `file:<path>#<key>` secret reference.
pub fn resolve_secret(reference: &str) -> Result<String, ConfigError> {
    match parse_secret_ref(reference) {
        Some(SecretRef::Env(var)) => std::env::var(var)
            .map_err(|_| ConfigError::Secret(format!("environment variable {var} is not set"))),
        Some(SecretRef::File { path, key }) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::Secret(format!("cannot read {path}: {e}")))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError::Secret(format!("{path} is not valid JSON: {e}")))?;
            doc.get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| ConfigError::Secret(format!("key {key:?} missing in {path}")))
        }
        None => Err(ConfigError::Secret(format!(
            "unsupported secret reference {reference:?} (use env:<VAR> or file:<path>#<key>)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TlsSettings {
    pub enabled: bool,
    pub ca_path: Option<PathBuf>,
    pub verify_server_name: bool,
}

impl Default for TlsSettings {
    fn default() -> Self {
        TlsSettings {
            enabled: false,
            ca_path: None,
            verify_server_name: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconnectPolicy {
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        ReconnectPolicy {
            initial_backoff_ms: DEFAULT_INITIAL_BACKOFF_MS,
            max_backoff_ms: DEFAULT_MAX_BACKOFF_MS,
            multiplier: DEFAULT_BACKOFF_MULTIPLIER,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DestinationParams {
    /// Overrides the `/queue/<name>` or `/topic/<name>` wire path.
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MqServiceConfig {
    pub service_id: String,
    pub protocol: String,
    pub host: String,
    pub port: u16,
    pub virtual_host: Option<String>,
    pub auth: AuthConfig,
    pub tls: TlsSettings,
    pub heartbeat_out_ms: u64,
    pub heartbeat_in_ms: u64,
    pub reconnect: ReconnectPolicy,
    pub queues: BTreeMap<String, DestinationParams>,
    pub topics: BTreeMap<String, DestinationParams>,
}

impl MqServiceConfig {
    /// A STOMP service with default heartbeats and backoff and no destinations.
    pub fn new(service_id: impl Into<String>, host: impl Into<String>, port: u16, auth: AuthConfig) -> Self {
        MqServiceConfig {
            service_id: service_id.into(),
            protocol: "stomp".into(),
            host: host.into(),
            port,
            virtual_host: None,
            auth,
            tls: TlsSettings::default(),
            heartbeat_out_ms: DEFAULT_HEARTBEAT_MS,
            heartbeat_in_ms: DEFAULT_HEARTBEAT_MS,
            reconnect: ReconnectPolicy::default(),
            queues: BTreeMap::new(),
            topics: BTreeMap::new(),
        }
    }

    pub fn with_queue(mut self, name: impl Into<String>) -> Self {
        self.queues.insert(name.into(), DestinationParams::default());
        self
    }

    pub fn with_topic(mut self, name: impl Into<String>) -> Self {
        self.topics.insert(name.into(), DestinationParams::default());
        self
    }

    fn destinations(&self, kind: DestinationKind) -> &BTreeMap<String, DestinationParams> {
        match kind {
            DestinationKind::Queue => &self.queues,
            DestinationKind::Topic => &self.topics,
        }
    }

    pub fn wire_path(&self, kind: DestinationKind, name: &str) -> Option<String> {
        self.destinations(kind).get(name).map(|params| {
            params
                .path
                .clone()
                .unwrap_or_else(|| format!("{}{name}", kind.path_prefix()))
        })
    }
}

/// Immutable set of configured MQ services, keyed by service id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigTree {
    pub services: BTreeMap<String, Arc<MqServiceConfig>>,
}

impl ConfigTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_service(mut self, service: MqServiceConfig) -> Self {
        self.services
            .insert(service.service_id.clone(), Arc::new(service));
        self
    }

    pub fn service(&self, service_id: &str) -> Option<&Arc<MqServiceConfig>> {
        self.services.get(service_id)
    }

    /// Reads and parses a config file.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        load_config(&bytes)
    }

    /// Every declared destination in the tree, in service/kind/name order.
    pub fn declared(&self) -> impl Iterator<Item = DestinationSpec> + '_ {
        self.services.values().flat_map(|svc| {
            let queues = svc
                .queues
                .keys()
                .map(move |n| DestinationSpec::new(&svc.service_id, DestinationKind::Queue, n));
            let topics = svc
                .topics
                .keys()
                .map(move |n| DestinationSpec::new(&svc.service_id, DestinationKind::Topic, n));
            queues.chain(topics)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedDestination {
    pub service: Arc<MqServiceConfig>,
    pub destination: DestinationSpec,
    pub wire_path: String,
}

/// Resolves a full pseudo-URL, or the shorthands `Kind::Name` and `Name`.
///
/// Shorthands resolve only when exactly one declared destination in the
/// whole tree matches.
pub fn resolve(tree: &ConfigTree, query: &str) -> Result<ResolvedDestination, ConfigError> {
    let segments: Vec<&str> = query.split(SEPARATOR).collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::MalformedPseudoUrl(query.to_string()));
    }
    let spec = match segments.as_slice() {
        [_, _, _] => parse_pseudo_url(query)?,
        [kind, name] => {
            let kind: DestinationKind = kind.parse()?;
            unique_match(tree, query, |d| d.kind == kind && d.name == *name)?
        }
        [name] => unique_match(tree, query, |d| d.name == *name)?,
        _ => return Err(ConfigError::MalformedPseudoUrl(query.to_string())),
    };
    let service = tree
        .service(&spec.service_id)
        .ok_or_else(|| ConfigError::UnknownService(spec.service_id.clone()))?;
    let wire_path = service
        .wire_path(spec.kind, &spec.name)
        .ok_or_else(|| ConfigError::UndeclaredDestination(spec.to_string()))?;
    Ok(ResolvedDestination {
        service: Arc::clone(service),
        destination: spec,
        wire_path,
    })
}

fn unique_match(
    tree: &ConfigTree,
    query: &str,
    matches: impl Fn(&DestinationSpec) -> bool,
) -> Result<DestinationSpec, ConfigError> {
    let mut candidates: Vec<DestinationSpec> = tree.declared().filter(|d| matches(d)).collect();
    match candidates.len() {
        0 => Err(ConfigError::UndeclaredDestination(query.to_string())),
        1 => Ok(candidates.remove(0)),
        _ => Err(ConfigError::AmbiguousShorthand {
            query: query.to_string(),
            candidates: candidates.iter().map(ToString::to_string).collect(),
        }),
    }
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every invariant of the tree against the built-in protocol set.
pub fn validate(tree: &ConfigTree) -> Vec<Violation> {
    validate_with_protocols(tree, BUILTIN_PROTOCOLS)
}

/// Collects all violations; never stops at the first one.
pub fn validate_with_protocols(tree: &ConfigTree, protocols: &[&str]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Violation { path, message });

    for (key, svc) in &tree.services {
        let base = format!("Resources.MQServices.{key}");
        if key != &svc.service_id {
            push(
                base.clone(),
                format!("key does not match service_id {:?}", svc.service_id),
            );
        }
        if svc.service_id.is_empty() || svc.service_id.contains(SEPARATOR) {
            push(base.clone(), "service id must be non-empty and free of \"::\"".into());
        }
        if !protocols.contains(&svc.protocol.as_str()) {
            push(
                format!("{base}.MQType"),
                format!("no connector registered for protocol {:?}", svc.protocol),
            );
        }
        if svc.host.is_empty() {
            push(format!("{base}.Host"), "host must not be empty".into());
        }
        if svc.port == 0 {
            push(format!("{base}.Port"), "port out of range".into());
        }
        validate_auth(&svc.auth, &format!("{base}.Auth"), &mut push);
        if let Some(ca) = &svc.tls.ca_path {
            if !ca.exists() {
                push(format!("{base}.Tls.CaPath"), format!("file {} does not exist", ca.display()));
            }
        }
        let r = &svc.reconnect;
        if r.initial_backoff_ms < 1 {
            push(format!("{base}.Reconnect.InitialBackoffMs"), "must be at least 1".into());
        }
        if r.max_backoff_ms < r.initial_backoff_ms {
            push(
                format!("{base}.Reconnect.MaxBackoffMs"),
                "must be at least InitialBackoffMs".into(),
            );
        }
        if r.multiplier.is_nan() || r.multiplier < 1.0 {
            push(format!("{base}.Reconnect.Multiplier"), "must be at least 1.0".into());
        }
        for (section, kind) in [("Queues", DestinationKind::Queue), ("Topics", DestinationKind::Topic)] {
            for (name, params) in svc.destinations(kind) {
                if name.is_empty() || name.contains(SEPARATOR) {
                    push(
                        format!("{base}.{section}.{name}"),
                        "destination name must be non-empty and free of \"::\"".into(),
                    );
                }
                if let Some(path) = &params.path {
                    if !path.starts_with('/') {
                        push(format!("{base}.{section}.{name}.Path"), "path must start with '/'".into());
                    }
                }
            }
        }
        for name in svc.queues.keys().filter(|n| svc.topics.contains_key(*n)) {
            push(
                format!("{base}.Topics.{name}"),
                format!("{name:?} is declared both as a queue and as a topic"),
            );
        }
    }
    out
}

fn validate_auth(auth: &AuthConfig, base: &str, push: &mut impl FnMut(String, String)) {
    let has_userpass = auth.user.is_some() || auth.password_ref.is_some();
    let has_cert = auth.cert_path.is_some() || auth.key_path.is_some() || auth.ca_path.is_some();
    match auth.mode {
        AuthMode::UserPass => {
            if auth.user.as_deref().is_none_or(str::is_empty) {
                push(format!("{base}.User"), "user must not be empty in UserPass mode".into());
            }
            match auth.password_ref.as_deref() {
                None | Some("") => push(
                    format!("{base}.PasswordRef"),
                    "password reference required in UserPass mode".into(),
                ),
                Some(r) => match parse_secret_ref(r) {
                    None => push(
                        format!("{base}.PasswordRef"),
                        "must be env:<VAR> or file:<path>#<key>".into(),
                    ),
                    Some(SecretRef::File { path, .. }) if !Path::new(path).exists() => push(
                        format!("{base}.PasswordRef"),
                        format!("secrets file {path} does not exist"),
                    ),
                    Some(_) => {}
                },
            }
            if has_cert {
                push(base.to_string(), "certificate fields are not allowed in UserPass mode".into());
            }
        }
        AuthMode::TlsClientCert => {
            for (field, value) in [
                ("CertPath", &auth.cert_path),
                ("KeyPath", &auth.key_path),
                ("CaPath", &auth.ca_path),
            ] {
                match value {
                    None => push(format!("{base}.{field}"), "required in TlsClientCert mode".into()),
                    Some(p) if !p.exists() => push(
                        format!("{base}.{field}"),
                        format!("file {} does not exist", p.display()),
                    ),
                    Some(_) => {}
                }
            }
            if has_userpass {
                push(base.to_string(), "User/PasswordRef are not allowed in TlsClientCert mode".into());
            }
        }
    }
}

/// Parses the JSON config document and fills in defaults.
///
/// Structural problems (wrong types, out-of-range numbers, unknown keys inside
/// a service) are reported as [`ConfigError::Schema`]; semantic invariants are
/// left to [`validate`].
pub fn load_config(bytes: &[u8]) -> Result<ConfigTree, ConfigError> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root = as_object(&doc, "$")?;
    let mut tree = ConfigTree::new();
    let Some(resources) = root.get("Resources") else {
        return Ok(tree);
    };
    let resources = as_object(resources, "Resources")?;
    let Some(services) = resources.get("MQServices") else {
        return Ok(tree);
    };
    for (service_id, body) in as_object(services, "Resources.MQServices")? {
        let key = format!("Resources.MQServices.{service_id}");
        let svc = parse_service(service_id, body, &key)?;
        tree.services.insert(service_id.clone(), Arc::new(svc));
    }
    Ok(tree)
}

fn parse_service(service_id: &str, body: &Value, key: &str) -> Result<MqServiceConfig, ConfigError> {
    let obj = as_object(body, key)?;
    check_keys(
        obj,
        key,
        &[
            "MQType", "Host", "Port", "VirtualHost", "Auth", "Tls", "HeartbeatOutMs", "HeartbeatInMs",
            "Reconnect", "Queues", "Topics",
        ],
    )?;
    let port = match obj.get("Port") {
        None => DEFAULT_PORT,
        Some(v) => {
            let n = as_u64(v, &format!("{key}.Port"))?;
            if !(1..=65535).contains(&n) {
                return Err(schema(format!("{key}.Port"), "port out of range"));
            }
            n as u16
        }
    };
    let reconnect = match obj.get("Reconnect") {
        None => ReconnectPolicy::default(),
        Some(v) => {
            let rkey = format!("{key}.Reconnect");
            let r = as_object(v, &rkey)?;
            check_keys(r, &rkey, &["InitialBackoffMs", "MaxBackoffMs", "Multiplier"])?;
            ReconnectPolicy {
                initial_backoff_ms: opt_u64(r, "InitialBackoffMs", &rkey)?
                    .unwrap_or(DEFAULT_INITIAL_BACKOFF_MS),
                max_backoff_ms: opt_u64(r, "MaxBackoffMs", &rkey)?.unwrap_or(DEFAULT_MAX_BACKOFF_MS),
                multiplier: match r.get("Multiplier") {
                    None => DEFAULT_BACKOFF_MULTIPLIER,
                    Some(m) => m
                        .as_f64()
                        .ok_or_else(|| schema(format!("{rkey}.Multiplier"), "expected a number"))?,
                },
            }
        }
    };
    let tls = match obj.get("Tls") {
        None => TlsSettings::default(),
        Some(v) => {
            let tkey = format!("{key}.Tls");
            let t = as_object(v, &tkey)?;
            check_keys(t, &tkey, &["Enabled", "CaPath", "VerifyServerName"])?;
            TlsSettings {
                enabled: opt_bool(t, "Enabled", &tkey)?.unwrap_or(false),
                ca_path: opt_str(t, "CaPath", &tkey)?.map(PathBuf::from),
                verify_server_name: opt_bool(t, "VerifyServerName", &tkey)?.unwrap_or(true),
            }
        }
    };
    Ok(MqServiceConfig {
        service_id: service_id.to_string(),
        protocol: opt_str(obj, "MQType", key)?.unwrap_or_else(|| "stomp".into()),
        host: opt_str(obj, "Host", key)?.ok_or_else(|| schema(format!("{key}.Host"), "missing required key"))?,
        port,
        virtual_host: opt_str(obj, "VirtualHost", key)?,
        auth: parse_auth(obj.get("Auth"), &format!("{key}.Auth"))?,
        tls,
        heartbeat_out_ms: opt_u64(obj, "HeartbeatOutMs", key)?.unwrap_or(DEFAULT_HEARTBEAT_MS),
        heartbeat_in_ms: opt_u64(obj, "HeartbeatInMs", key)?.unwrap_or(DEFAULT_HEARTBEAT_MS),
        reconnect,
        queues: parse_destinations(obj.get("Queues"), &format!("{key}.Queues"))?,
        topics: parse_destinations(obj.get("Topics"), &format!("{key}.Topics"))?,
    })
}

fn parse_auth(value: Option<&Value>, key: &str) -> Result<AuthConfig, ConfigError> {
    let value = value.ok_or_else(|| schema(key, "missing required key"))?;
    let obj = as_object(value, key)?;
    check_keys(obj, key, &["Mode", "User", "PasswordRef", "CertPath", "KeyPath", "CaPath"])?;
    let mode = match opt_str(obj, "Mode", key)?.as_deref() {
        Some("UserPass") => AuthMode::UserPass,
        Some("TlsClientCert") => AuthMode::TlsClientCert,
        Some(other) => {
            return Err(schema(
                format!("{key}.Mode"),
                format!("unknown auth mode {other:?} (expected {} or {})", AuthMode::UserPass.as_str(), AuthMode::TlsClientCert.as_str()),
            ))
        }
        None => return Err(schema(format!("{key}.Mode"), "missing required key")),
    };
    Ok(AuthConfig {
        mode,
        user: opt_str(obj, "User", key)?,
        password_ref: opt_str(obj, "PasswordRef", key)?,
        cert_path: opt_str(obj, "CertPath", key)?.map(PathBuf::from),
        key_path: opt_str(obj, "KeyPath", key)?.map(PathBuf::from),
        ca_path: opt_str(obj, "CaPath", key)?.map(PathBuf::from),
    })
}

fn parse_destinations(
    value: Option<&Value>,
    key: &str,
) -> Result<BTreeMap<String, DestinationParams>, ConfigError> {
    let mut out = BTreeMap::new();
    let Some(value) = value else {
        return Ok(out);
    };
    for (name, params) in as_object(value, key)? {
        let pkey = format!("{key}.{name}");
        let p = as_object(params, &pkey)?;
        check_keys(p, &pkey, &["Path"])?;
        out.insert(
            name.clone(),
            DestinationParams {
                path: opt_str(p, "Path", &pkey)?,
            },
        );
    }
    Ok(out)
}

fn schema(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        key: key.into(),
        message: message.into(),
    }
}

fn as_object<'a>(v: &'a Value, key: &str) -> Result<&'a Map<String, Value>, ConfigError> {
    v.as_object().ok_or_else(|| schema(key, "expected an object"))
}

fn as_u64(v: &Value, key: &str) -> Result<u64, ConfigError> {
    v.as_u64()
        .ok_or_else(|| schema(key, "expected a non-negative integer"))
}

fn check_keys(obj: &Map<String, Value>, key: &str, allowed: &[&str]) -> Result<(), ConfigError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(unknown) => Err(schema(format!("{key}.{unknown}"), "unknown key")),
        None => Ok(()),
    }
}

fn opt_u64(obj: &Map<String, Value>, field: &str, key: &str) -> Result<Option<u64>, ConfigError> {
    obj.get(field)
        .map(|v| as_u64(v, &format!("{key}.{field}")))
        .transpose()
}

fn opt_str(obj: &Map<String, Value>, field: &str, key: &str) -> Result<Option<String>, ConfigError> {
    obj.get(field)
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| schema(format!("{key}.{field}"), "expected a string"))
        })
        .transpose()
}

fn opt_bool(obj: &Map<String, Value>, field: &str, key: &str) -> Result<Option<bool>, ConfigError> {
    obj.get(field)
        .map(|v| {
            v.as_bool()
                .ok_or_else(|| schema(format!("{key}.{field}"), "expected a boolean"))
        })
        .transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn svc(id: &str) -> MqServiceConfig {
        MqServiceConfig::new(id, "localhost", 61613, AuthConfig::user_pass("guest", "env:MQ_PASSWORD"))
    }

    #[test]
    fn parses_full_pseudo_url() {
        let spec = parse_pseudo_url("mq.example.org::Queue::Q2").unwrap();
        assert_eq!(spec, DestinationSpec::new("mq.example.org", DestinationKind::Queue, "Q2"));
    }

    #[test]
    fn parses_topic() {
        let spec = parse_pseudo_url("broker.local::Topic::T1").unwrap();
        assert_eq!(spec.kind, DestinationKind::Topic);
        assert_eq!(spec.name, "T1");
    }

    #[test]
    fn rejects_bad_kind_and_shape() {
        assert_eq!(
            parse_pseudo_url("broker.local::Stack::X"),
            Err(ConfigError::InvalidKind("Stack".into()))
        );
        assert!(matches!(parse_pseudo_url("broker.local::queue::X"), Err(ConfigError::InvalidKind(_))));
        for bad in ["a::Queue", "a::Queue::b::c", "::Queue::b", "a::Queue::", "", "a:Queue:b"] {
            assert!(
                matches!(parse_pseudo_url(bad), Err(ConfigError::MalformedPseudoUrl(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn resolves_full_and_shorthand() {
        let tree = ConfigTree::new().with_service(svc("mq.example.org").with_queue("Q2"));
        let full = resolve(&tree, "mq.example.org::Queue::Q2").unwrap();
        assert_eq!(full.wire_path, "/queue/Q2");
        assert_eq!(full.service.port, 61613);
        assert_eq!(resolve(&tree, "Q2").unwrap(), full);
        assert_eq!(resolve(&tree, "Queue::Q2").unwrap(), full);
        assert!(matches!(resolve(&tree, "Topic::Q2"), Err(ConfigError::UndeclaredDestination(_))));
    }

    #[test]
    fn ambiguous_shorthand_lists_candidates() {
        let tree = ConfigTree::new()
            .with_service(svc("a").with_queue("Q2"))
            .with_service(svc("b").with_queue("Q2"));
        match resolve(&tree, "Q2") {
            Err(ConfigError::AmbiguousShorthand { candidates, .. }) => {
                assert_eq!(candidates, vec!["a::Queue::Q2", "b::Queue::Q2"]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(resolve(&tree, "a::Queue::Q2").is_ok());
    }

    #[test]
    fn resolve_errors() {
        let tree = ConfigTree::new().with_service(svc("a").with_queue("Q1").with_topic("T1"));
        assert_eq!(
            resolve(&tree, "b::Queue::Q1"),
            Err(ConfigError::UnknownService("b".into()))
        );
        assert!(matches!(resolve(&tree, "a::Queue::Q9"), Err(ConfigError::UndeclaredDestination(_))));
        assert!(matches!(resolve(&tree, "a::Queue::T1"), Err(ConfigError::UndeclaredDestination(_))));
        assert_eq!(resolve(&tree, "a::Topic::T1").unwrap().wire_path, "/topic/T1");
    }

    #[test]
    fn path_override() {
        let mut s = svc("a");
        s.queues.insert("Q".into(), DestinationParams { path: Some("/amq/queue/Q".into()) });
        let tree = ConfigTree::new().with_service(s);
        assert_eq!(resolve(&tree, "a::Queue::Q").unwrap().wire_path, "/amq/queue/Q");
    }

    #[test]
    fn load_minimal_document_fills_defaults() {
        let doc = br#"{"Resources":{"MQServices":{"mq.example":{"Host":"mq.example",
            "Auth":{"Mode":"UserPass","User":"u","PasswordRef":"env:X"},"Queues":{"Q1":{}}}}}}"#;
        let tree = load_config(doc).unwrap();
        let s = tree.service("mq.example").unwrap();
        assert_eq!(s.port, 61613);
        assert_eq!(s.protocol, "stomp");
        assert_eq!((s.heartbeat_out_ms, s.heartbeat_in_ms), (10_000, 10_000));
        assert_eq!(s.reconnect, ReconnectPolicy { initial_backoff_ms: 500, max_backoff_ms: 30_000, multiplier: 2.0 });
        assert!(s.queues.contains_key("Q1"));
        assert!(validate(&tree).is_empty());
    }

    #[test]
    fn load_rejects_port_out_of_range() {
        let doc = br#"{"Resources":{"MQServices":{"s":{"Host":"h","Port":70000,
            "Auth":{"Mode":"UserPass","User":"u","PasswordRef":"env:X"}}}}}"#;
        match load_config(doc) {
            Err(ConfigError::Schema { key, message }) => {
                assert_eq!(key, "Resources.MQServices.s.Port");
                assert_eq!(message, "port out of range");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_empty_services_and_parse_errors() {
        let tree = load_config(br#"{"Resources":{"MQServices":{}}}"#).unwrap();
        assert!(tree.services.is_empty());
        match load_config(b"{\n  \"Resources\": ,\n}") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_config(br#"{"Resources":{"MQServices":{"s":{"Host":"h","Prot":1}}}}"#),
            Err(ConfigError::Schema { key, .. }) if key == "Resources.MQServices.s.Prot"
        ));
    }

    #[test]
    fn validate_reports_all_violations() {
        let mut s = svc("s").with_queue("X").with_topic("X");
        s.auth.user = Some(String::new());
        let tree = ConfigTree::new().with_service(s);
        let v = validate(&tree);
        assert_eq!(v.len(), 2, "{v:?}");
        assert!(v.iter().any(|v| v.path == "Resources.MQServices.s.Auth.User"));
        assert!(v.iter().any(|v| v.path == "Resources.MQServices.s.Topics.X"));
    }

    #[test]
    fn validate_checks_cert_files_and_backoff() {
        let mut s = svc("s");
        s.auth = AuthConfig::tls_client_cert("/nonexistent/c.pem", "/nonexistent/k.pem", "/nonexistent/ca.pem");
        s.reconnect = ReconnectPolicy { initial_backoff_ms: 0, max_backoff_ms: 0, multiplier: 0.5 };
        s.protocol = "amqp".into();
        let v = validate(&ConfigTree::new().with_service(s));
        let paths: Vec<&str> = v.iter().map(|v| v.path.as_str()).collect();
        assert!(paths.contains(&"Resources.MQServices.s.Auth.CertPath"));
        assert!(paths.contains(&"Resources.MQServices.s.Auth.KeyPath"));
        assert!(paths.contains(&"Resources.MQServices.s.Auth.CaPath"));
        assert!(paths.contains(&"Resources.MQServices.s.Reconnect.InitialBackoffMs"));
        assert!(paths.contains(&"Resources.MQServices.s.Reconnect.Multiplier"));
        assert!(paths.contains(&"Resources.MQServices.s.MQType"));
    }

    #[test]
    fn secrets_file_reference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("secrets.json");
        std::fs::write(&path, r#"{"mq":"s3cret"}"#).unwrap();
        let reference = format!("file:{}#mq", path.display());
        assert_eq!(resolve_secret(&reference).unwrap(), "s3cret");
        assert!(resolve_secret(&format!("file:{}#nope", path.display())).is_err());
        assert!(resolve_secret("plaintext").is_err());
    }

    fn segment() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9._-]{1,12}"
    }

    fn kind() -> impl Strategy<Value = DestinationKind> {
        prop_oneof![Just(DestinationKind::Queue), Just(DestinationKind::Topic)]
    }

    proptest! {
        #[test]
        fn pseudo_url_round_trip(service in segment(), kind in kind(), name in segment()) {
            let spec = DestinationSpec::new(service, kind, name);
            prop_assert_eq!(parse_pseudo_url(&spec.to_string()).unwrap(), spec);
        }

        #[test]
        fn resolve_matches_declarations(
            decls in proptest::collection::vec((0..3usize, kind(), 0..4usize), 0..10),
            probe_svc in 0..3usize, probe_kind in kind(), probe_name in 0..4usize,
        ) {
            let mut services: BTreeMap<String, MqServiceConfig> = BTreeMap::new();
            for (s, k, n) in &decls {
                let entry = services.entry(format!("s{s}")).or_insert_with(|| svc(&format!("s{s}")));
                let name = format!("d{n}");
                // keep queue/topic names disjoint within a service
                if k == &DestinationKind::Queue && !entry.topics.contains_key(&name) {
                    entry.queues.insert(name, DestinationParams::default());
                } else if k == &DestinationKind::Topic && !entry.queues.contains_key(&name) {
                    entry.topics.insert(name, DestinationParams::default());
                }
            }
            let mut tree = ConfigTree::new();
            for (_, s) in services { tree = tree.with_service(s); }
            for d in tree.declared() {
                let r = resolve(&tree, &d.to_string()).unwrap();
                prop_assert_eq!(&r.destination, &d);
            }
            let probe = DestinationSpec::new(format!("s{probe_svc}"), probe_kind, format!("d{probe_name}"));
            let declared = tree.declared().any(|d| d == probe);
            let result = resolve(&tree, &probe.to_string());
            let ambiguous = matches!(result, Err(ConfigError::AmbiguousShorthand { .. }));
            prop_assert!(!ambiguous);
            prop_assert_eq!(result.is_ok(), declared);
        }
    }
}
