mod common;

use std::io::Write;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use common::*;
use mqware_broker::BrokerConfig;
use mqware_gateway::TokenTable;
use serde_json::{json, Value};

async fn run(mut cmd: Command) -> Output {
    tokio::task::spawn_blocking(move || cmd.output().expect("run mqctl")).await.unwrap()
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout).lines().map(str::to_string).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn produce_then_consume_prints_the_payload() {
    let broker = start_broker(BrokerConfig::ephemeral()).await;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"Resources": {"MQServices": {"local": service_json(broker.addr().unwrap().port(), &["Q1"], &[])}}}),
    );
    let mut produce = mqctl();
    produce.args(["--config"]).arg(&cfg).args(["produce", "--dest", "local::Queue::Q1", "--message", r#"{"b":2,"a":1}"#]);
    let out = run(produce).await;
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut consume = mqctl();
    consume.env("MQCONFIG", &cfg).args(["consume", "--dest", "Q1", "--count", "1"]);
    let out = run(consume).await;
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_lines(&out), [r#"{"a":1,"b":2}"#]);
    broker.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn produce_reads_stdin_and_consume_can_print_envelopes() {
    let broker = start_broker(BrokerConfig::ephemeral()).await;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"Resources": {"MQServices": {"local": service_json(broker.addr().unwrap().port(), &["Q1"], &[])}}}),
    );
    let cfg2 = cfg.clone();
    let status = tokio::task::spawn_blocking(move || {
        let mut child = mqctl()
            .arg("--config")
            .arg(&cfg2)
            .args(["produce", "--dest", "local::Queue::Q1"])
            .stdin(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(b"[1, 2, 3]\n").unwrap();
        child.wait().unwrap()
    })
    .await
    .unwrap();
    assert!(status.success());
    let mut consume = mqctl();
    consume.arg("--config").arg(&cfg).args(["consume", "--dest", "local::Queue::Q1", "--count", "1", "--envelope"]);
    let out = run(consume).await;
    let env: Value = serde_json::from_str(&stdout_lines(&out)[0]).unwrap();
    assert_eq!(env["payload"], json!([1, 2, 3]));
    assert_eq!(env["destination"], "/queue/Q1");
    assert_eq!(env["message-id"].as_str().unwrap().len(), 32);
    broker.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn consume_with_count_leaves_the_rest_queued() {
    let broker = start_broker(BrokerConfig::ephemeral()).await;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"Resources": {"MQServices": {"local": service_json(broker.addr().unwrap().port(), &["Q1"], &[])}}}),
    );
    for n in 0..5 {
        let mut p = mqctl();
        p.arg("--config").arg(&cfg).args(["produce", "--dest", "Q1", "--message", &n.to_string()]);
        assert!(run(p).await.status.success());
    }
    let mut c = mqctl();
    c.arg("--config").arg(&cfg).args(["consume", "--dest", "Q1", "--count", "2"]);
    assert_eq!(stdout_lines(&run(c).await), ["0", "1"]);
    let mut c = mqctl();
    c.arg("--config").arg(&cfg).args(["consume", "--dest", "Q1", "--count", "3"]);
    assert_eq!(stdout_lines(&run(c).await), ["2", "3", "4"]);
    let stats = broker.stats().await;
    assert_eq!(stats.queue("/queue/Q1").pending, 0);
    assert_eq!(stats.queue("/queue/DLQ.Q1").published, 0);
    broker.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unresolvable_destination_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"Resources": {"MQServices": {"local": service_json(1, &["Q1"], &[])}}}));
    let mut p = mqctl();
    p.arg("--config").arg(&cfg).args(["produce", "--dest", "local::Queue::Nope", "--message", "{}"]);
    let out = run(p).await;
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not declared"));
    let mut p = mqctl();
    p.arg("--config").arg(dir.path().join("missing.json")).args(["produce", "--dest", "Q1", "--message", "{}"]);
    assert_eq!(run(p).await.status.code(), Some(2));
    let mut p = mqctl();
    p.arg("--config").arg(&cfg).args(["produce", "--dest", "Q1", "--message", "{not json"]);
    assert_eq!(run(p).await.status.code(), Some(2));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn broker_down_with_no_retry_exits_3() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"Resources": {"MQServices": {"local": service_json(port, &["Q1"], &[])}}}));
    let mut c = mqctl();
    c.arg("--config").arg(&cfg).args(["consume", "--dest", "Q1", "--no-retry"]);
    let out = run(c).await;
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let mut p = mqctl();
    p.arg("--config").arg(&cfg).args(["produce", "--dest", "Q1", "--message", "1"]);
    assert_eq!(run(p).await.status.code(), Some(3));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn consume_retries_until_the_broker_appears() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"Resources": {"MQServices": {"local": service_json(port, &["Q1"], &[])}}}));
    let mut c = mqctl();
    c.arg("--config").arg(&cfg).args(["consume", "--dest", "Q1", "--count", "1"]);
    let consumer = tokio::task::spawn_blocking(move || c.output().unwrap());
    tokio::time::sleep(Duration::from_millis(300)).await;
    let mut bc = BrokerConfig::ephemeral();
    bc.listen = Some(format!("127.0.0.1:{port}").parse().unwrap());
    let broker = start_broker(bc).await;
    let mut p = mqctl();
    p.arg("--config").arg(&cfg).args(["produce", "--dest", "Q1", "--message", "\"late\""]);
    assert!(run(p).await.status.success());
    let out = tokio::time::timeout(Duration::from_secs(15), consumer).await.unwrap().unwrap();
    assert_eq!(stdout_lines(&out), [r#""late""#]);
    broker.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn broker_subcommand_serves_until_terminated() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("sessions.log");
    let cfg = write_config(
        dir.path(),
        &json!({"Broker": {"Listen": "127.0.0.1:0", "LogPath": log, "Users": {"tester": {"PasswordRef": format!("env:{PASSWORD_VAR}")}}}}),
    );
    let mut cmd = mqctl();
    cmd.arg("--config").arg(&cfg).arg("broker");
    let (daemon, addr) = Daemon::spawn(cmd, "broker listening on tcp://");
    let port: u16 = addr.rsplit(':').next().unwrap().parse().unwrap();
    let client_cfg = write_config_as(
        dir.path(),
        "client.json",
        &json!({"Resources": {"MQServices": {"local": service_json(port, &["Q1"], &[])}}}),
    );
    let mut p = mqctl();
    p.arg("--config").arg(&client_cfg).args(["produce", "--dest", "Q1", "--message", "7"]);
    assert!(run(p).await.status.success());
    assert!(daemon.terminate().success());
    let text = std::fs::read_to_string(&log).unwrap();
    let events: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(events.iter().any(|e| e["event"] == "session_open" && e["principal"] == "tester"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn hash_token_output_is_a_usable_table_entry() {
    let mut h = mqctl();
    h.env("GW_TOKEN", "pilot-secret").args(["hash-token", "--principal", "ce-1", "--token-ref", "env:GW_TOKEN"]);
    let out = run(h).await;
    assert!(out.status.success());
    let entry: mqware_gateway::TokenEntry = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!String::from_utf8_lossy(&out.stdout).contains("pilot-secret"));
    assert_eq!(TokenTable::new(vec![entry]).authenticate("pilot-secret"), Some("ce-1"));
    let mut h = mqctl();
    h.args(["hash-token", "--principal", "ce-1", "--token-ref", "pilot-secret"]);
    assert_eq!(run(h).await.status.code(), Some(2));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn validate_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = service_json(61613, &["Q1"], &[]);
    svc["Auth"] = json!({"Mode": "UserPass", "User": "u", "PasswordRef": "plaintext"});
    svc["MQType"] = json!("carrier-pigeon");
    let cfg = write_config(dir.path(), &json!({"Resources": {"MQServices": {"local": svc}}}));
    let mut v = mqctl();
    v.arg("--config").arg(&cfg).arg("validate");
    let out = run(v).await;
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout_lines(&out).len() >= 2, "{:?}", stdout_lines(&out));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pipeline_through_gateway_and_sink_processes() {
    let broker = start_broker(BrokerConfig::ephemeral()).await;
    let dir = tempfile::tempdir().unwrap();
    let entry = mqware_gateway::TokenEntry::issue("ce-test", "tok-123");
    let cfg = write_config(
        dir.path(),
        &json!({
            "Resources": {"MQServices": {"local": service_json(broker.addr().unwrap().port(), &["pilotlogs"], &[])}},
            "Gateway": {"Listen": "127.0.0.1:0", "Destination": "local::Queue::pilotlogs",
                        "SpoolDir": dir.path().join("gw-spool"), "Tokens": [entry]}
        }),
    );
    let mut gw = mqctl();
    gw.arg("--config").arg(&cfg).arg("gateway");
    let (gateway, url) = Daemon::spawn(gw, "gateway listening on ");
    let out_dir = dir.path().join("logs");
    let mut sk = mqctl();
    sk.arg("--config").arg(&cfg).args(["-v", "sink", "--dest", "pilotlogs", "--out"]).arg(&out_dir);
    let (sink, _) = Daemon::spawn(sk, "sink running");

    let uuid = "9b2f1c4e-1111-4c3d-8e9f-0123456789ab";
    let log = dir.path().join("pilot.log");
    std::fs::write(&log, "install|INFO|fetching\nconfigure|ERROR|no cvmfs\nplain line\n").unwrap();
    let mut ship = mqctl();
    ship.env("GW_TOKEN", "tok-123")
        .args(["ship-logs", "--gateway", &url, "--token-ref", "env:GW_TOKEN", "--pilot-uuid", uuid, "--source"])
        .arg(&log);
    let out = run(ship).await;
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let file = out_dir.join(format!("{uuid}.log"));
    assert!(wait_until(|| std::fs::read_to_string(&file).map(|t| t.lines().count() == 3).unwrap_or(false), Duration::from_secs(10)).await);
    assert!(sink.terminate().success());
    assert!(gateway.terminate().success());
    let rows: Vec<Value> = std::fs::read_to_string(&file)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows[1]["phase"], "configure");
    assert_eq!(rows[1]["severity"], "ERROR");
    assert_eq!(rows[2]["phase"], "unknown");
    assert!(rows.iter().all(|r| r["principal"] == "ce-test"));
    broker.shutdown().await;
}
