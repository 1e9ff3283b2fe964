#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use mqware::config::{AuthConfig, ConfigTree, MqServiceConfig};
use mqware_broker::{BrokerConfig, BrokerHandle};
use serde_json::{json, Value};

pub const PASSWORD_VAR: &str = "MQCTL_TEST_PASSWORD";
pub const PASSWORD: &str = "test-password";

pub fn mqctl() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mqctl"));
    cmd.env(PASSWORD_VAR, PASSWORD).env_remove("MQCONFIG");
    cmd
}

pub fn tls_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata/tls")
}

pub async fn start_broker(mut cfg: BrokerConfig) -> BrokerHandle {
    std::env::set_var(PASSWORD_VAR, PASSWORD);
    cfg = cfg.with_user("tester", format!("env:{PASSWORD_VAR}"));
    mqware_broker::start(cfg).await.expect("broker starts")
}

/// `Resources` section for one service on `port` with the given queues and topics.
pub fn service_json(port: u16, queues: &[&str], topics: &[&str]) -> Value {
    let q: serde_json::Map<String, Value> = queues.iter().map(|n| (n.to_string(), json!({}))).collect();
    let t: serde_json::Map<String, Value> = topics.iter().map(|n| (n.to_string(), json!({}))).collect();
    json!({
        "Host": "127.0.0.1",
        "Port": port,
        "Auth": {"Mode": "UserPass", "User": "tester", "PasswordRef": format!("env:{PASSWORD_VAR}")},
        "Reconnect": {"InitialBackoffMs": 50, "MaxBackoffMs": 500},
        "Queues": q,
        "Topics": t,
    })
}

pub fn write_config(dir: &Path, doc: &Value) -> PathBuf {
    write_config_as(dir, "mq.json", doc)
}

pub fn write_config_as(dir: &Path, name: &str, doc: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(doc).unwrap()).unwrap();
    path
}

pub fn tree_for(port: u16, queues: &[&str], topics: &[&str]) -> ConfigTree {
    let mut svc = MqServiceConfig::new("local", "127.0.0.1", port, AuthConfig::user_pass("tester", format!("env:{PASSWORD_VAR}")));
    for q in queues {
        svc = svc.with_queue(*q);
    }
    for t in topics {
        svc = svc.with_topic(*t);
    }
    svc.reconnect.initial_backoff_ms = 50;
    svc.reconnect.max_backoff_ms = 500;
    ConfigTree::new().with_service(svc)
}

/// A long-running `mqctl` child; killed on drop.
pub struct Daemon {
    pub child: Child,
}

impl Daemon {
    /// Spawns and waits for a stderr line containing `marker`; returns the
    /// rest of that line.
    pub fn spawn(mut cmd: Command, marker: &str) -> (Daemon, String) {
        let child = cmd.stderr(Stdio::piped()).stdout(Stdio::null()).spawn().expect("spawn mqctl");
        // from here on Drop kills and reaps the child on every path
        let mut daemon = Daemon { child };
        let mut stderr = BufReader::new(daemon.child.stderr.take().unwrap());
        let mut line = String::new();
        loop {
            line.clear();
            if stderr.read_line(&mut line).unwrap() == 0 {
                panic!("mqctl exited before printing {marker:?}");
            }
            if let Some(pos) = line.find(marker) {
                let rest = line[pos + marker.len()..].trim().to_string();
                // keep draining so the child never blocks on a full pipe
                std::thread::spawn(move || {
                    let mut sink = String::new();
                    while stderr.read_line(&mut sink).map(|n| n > 0).unwrap_or(false) {
                        sink.clear();
                    }
                });
                return (daemon, rest);
            }
        }
    }

    /// SIGTERM, then wait for a clean exit.
    pub fn terminate(mut self) -> std::process::ExitStatus {
        let _ = Command::new("kill").arg("-TERM").arg(self.child.id().to_string()).status();
        let deadline = std::time::Instant::now() + Duration::from_secs(10);
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status;
            }
            if std::time::Instant::now() > deadline {
                let _ = self.child.kill();
                return self.child.wait().unwrap();
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Polls `cond` every 10 ms until it holds or `limit` passes.
pub async fn wait_until(mut cond: impl FnMut() -> bool, limit: Duration) -> bool {
    let deadline = tokio::time::Instant::now() + limit;
    while tokio::time::Instant::now() < deadline {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    cond()
}
