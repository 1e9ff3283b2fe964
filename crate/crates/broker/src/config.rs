//! The `Broker` section of the shared JSON config file.
//!
//! ```json
//! "Broker": {
//!   "Listen": "127.0.0.1:61613",
//!   "TlsListen": "127.0.0.1:61614",
//!   "Tls": { "CertPath": "server.pem", "KeyPath": "server.key",
//!            "ClientCaPath": "ca.pem", "RequireClientCert": false },
//!   "Users": { "pilot": { "PasswordRef": "env:PILOT_MQ_PASSWORD" } },
//!   "CertAllowList": ["pilot-client"],
//!   "HeartbeatOutMs": 10000, "HeartbeatInMs": 10000,
//!   "QueueDepthLimit": 100000, "MaxRedeliveries": 5,
//!   "LogPath": "broker-sessions.log"
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::BrokerError;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:61613";
pub const DEFAULT_TLS_LISTEN: &str = "127.0.0.1:61614";

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields)]
pub struct ServerTlsConfig {
    pub cert_path: PathBuf,
    pub key_path: PathBuf,
    /// Trust anchor for client certificates; none disables client auth.
    #[serde(default)]
    pub client_ca_path: Option<PathBuf>,
    #[serde(default)]
    pub require_client_cert: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields)]
pub struct UserEntry {
    pub password_ref: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields, default)]
pub struct BrokerConfig {
    pub listen: Option<SocketAddr>,
    /// TLS listener; requires `tls`.
    pub tls_listen: Option<SocketAddr>,
    pub tls: Option<ServerTlsConfig>,
    pub users: BTreeMap<String, UserEntry>,
    /// Certificate common names admitted without a login.
    pub cert_allow_list: BTreeSet<String>,
    pub heartbeat_out_ms: u64,
    pub heartbeat_in_ms: u64,
    pub queue_depth_limit: usize,
    pub max_redeliveries: u32,
    pub max_frame_size: usize,
    pub log_path: Option<PathBuf>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            listen: Some(DEFAULT_LISTEN.parse().expect("valid default")),
            tls_listen: None,
            tls: None,
            users: BTreeMap::new(),
            cert_allow_list: BTreeSet::new(),
            heartbeat_out_ms: 10_000,
            heartbeat_in_ms: 10_000,
            queue_depth_limit: 100_000,
            max_redeliveries: 5,
            max_frame_size: mqware::stomp::DEFAULT_MAX_FRAME_SIZE,
            log_path: None,
        }
    }
}

impl BrokerConfig {
    /// Loopback on an ephemeral port, no users; handy for tests.
    pub fn ephemeral() -> Self {
        BrokerConfig {
            listen: Some("127.0.0.1:0".parse().expect("valid")),
            ..Default::default()
        }
    }

    pub fn with_user(mut self, user: impl Into<String>, password_ref: impl Into<String>) -> Self {
        self.users.insert(
            user.into(),
            UserEntry {
                password_ref: password_ref.into(),
            },
        );
        self
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, BrokerError> {
        BrokerConfig::deserialize(value).map_err(|e| BrokerError::Config(format!("Broker: {e}")))
    }

    /// Reads the `Broker` section of a config file; a missing section
    /// yields the defaults.
    pub fn from_path(path: &Path) -> Result<Self, BrokerError> {
        let text = std::fs::read_to_string(path).map_err(|e| BrokerError::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BrokerError::Config(format!("{}: {e}", path.display())))?;
        match value.get("Broker") {
            Some(section) => Self::from_json(section),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), BrokerError> {
        if self.listen.is_none() && self.tls_listen.is_none() {
            return Err(BrokerError::Config("no listener configured".into()));
        }
        if self.tls_listen.is_some() && self.tls.is_none() {
            return Err(BrokerError::Config("TlsListen requires a Tls section".into()));
        }
        if self.queue_depth_limit == 0 {
            return Err(BrokerError::Config("QueueDepthLimit must be positive".into()));
        }
        Ok(())
    }
}
