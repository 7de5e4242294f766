use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Output, Stdio};

use futures_util::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message;

const BIN: &str = env!("CARGO_BIN_EXE_treesync");

struct ServerProc {
    child: Child,
    tcp: String,
    ws: String,
}

impl Drop for ServerProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn_server(extra: &[&str]) -> ServerProc {
    let mut child = Command::new(BIN)
        .args(["serve", "--listen", "127.0.0.1:0", "--ws-listen", "127.0.0.1:0", "--seed-example"])
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut addr = |kind: &str| {
        let line = lines.next().unwrap().unwrap();
        line.strip_prefix(&format!("listening {kind} ")).unwrap().to_string()
    };
    let tcp = addr("tcp");
    let ws = addr("ws");
    ServerProc { child, tcp, ws }
}

fn cli(server: &str, args: &[&str]) -> Output {
    Command::new(BIN).arg("--server").arg(server).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

#[test]
fn get_reads_seeded_value() {
    let s = spawn_server(&[]);
    let o = cli(&s.tcp, &["get", "/sensors/temperature"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o), "23.2");

    let o = cli(&s.tcp, &["--json", "get", "/leds/led1"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["value"], serde_json::json!(false));
    assert_eq!(v["revision"], serde_json::json!(1));
}

#[test]
fn toggle_flips_back_and_forth() {
    let s = spawn_server(&[]);
    let o = cli(&s.tcp, &["toggle", "led1"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o), "led1 true revision 2");
    assert_eq!(stdout(&cli(&s.tcp, &["get", "/leds/led1"])), "true");
    assert_eq!(stdout(&cli(&s.tcp, &["toggle", "led1"])), "led1 false revision 3");
    assert_eq!(stdout(&cli(&s.tcp, &["get", "/leds/led1"])), "false");
}

#[test]
fn exit_codes() {
    let s = spawn_server(&[]);
    let o = cli(&s.tcp, &["put", "/leds/led1", "7"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("DENIED") && err.contains("MustBeBoolean"), "{err}");

    let o = cli(&s.tcp, &["put", "/sensors/temperature", "20"]);
    assert_eq!(o.status.code(), Some(2), "users cannot write sensors");

    let o = cli(&s.tcp, &["--token", "nope", "get", "/leds"]);
    assert_eq!(o.status.code(), Some(2));

    for args in [
        &["get", "leds"][..],
        &["get", "/a//b"],
        &["put", "/leds/led1", "tru"],
        &["toggle", "led9"],
    ] {
        assert_eq!(cli(&s.tcp, args).status.code(), Some(4), "{args:?}");
    }

    assert_eq!(cli(&s.tcp, &["put", "/leds/led2", "true"]).status.code(), Some(0));
}

#[test]
fn bad_input_is_rejected_before_connecting() {
    // Nothing listens on port 1; a local validation error must still win.
    assert_eq!(cli("127.0.0.1:1", &["get", "no-slash"]).status.code(), Some(4));
}

#[test]
fn unreachable_server_is_transport_error() {
    let o = cli("127.0.0.1:1", &["get", "/leds"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn watch_sees_snapshot_then_change() {
    let s = spawn_server(&[]);
    let watcher = Command::new(BIN)
        .args(["--server", &s.tcp, "watch", "/leds", "--count", "2"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    // Retry the write until the watcher's subscription is in place.
    let mut out = None;
    let mut watcher = Some(watcher);
    for _ in 0..50 {
        std::thread::sleep(std::time::Duration::from_millis(100));
        assert!(cli(&s.tcp, &["toggle", "led2"]).status.success());
        if let Some(status) = watcher.as_mut().unwrap().try_wait().unwrap() {
            assert!(status.success());
            out = Some(watcher.take().unwrap().wait_with_output().unwrap());
            break;
        }
    }
    let out = out.expect("watcher finished");
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[0].contains("/leds") && lines[0].contains("\"led1\":false"), "{text}");
    assert!(lines[1].contains("/leds/led2"), "{text}");
}

#[test]
fn data_dir_survives_restart_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    {
        let s = spawn_server(&["--data-dir", d]);
        assert!(cli(&s.tcp, &["put", "/leds/led1", "true"]).status.success());
    }
    let s = spawn_server(&["--data-dir", d]);
    assert_eq!(stdout(&cli(&s.tcp, &["get", "/leds/led1"])), "true");
    assert_eq!(stdout(&cli(&s.tcp, &["get", "/sensors/distance"])), "17.68");

    let o = Command::new(BIN).args(["dump-log", "--data-dir", d]).output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let revs: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["revision"].as_u64().unwrap())
        .collect();
    assert_eq!(revs, [1, 2]);
    let o = Command::new(BIN).args(["dump-log", "--data-dir", d, "--since", "1"]).output().unwrap();
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn sim_runs_shipped_experiment() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../experiments/recovery.json");
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let trace = dir.path().join("trace.jsonl");
    let o = Command::new(BIN)
        .args(["--config", root, "sim", "--report"])
        .arg(&report)
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(o.status.success(), "{o:?}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["frames_produced"].as_u64().unwrap() > 0);
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 0);
}

#[test]
fn agent_publishes_sensor_readings() {
    let s = spawn_server(&[]);
    let o = Command::new(BIN)
        .args(["--server", &s.tcp, "agent", "--run-for-ms", "2500", "--sensor-seed", "3"])
        .stderr(Stdio::null())
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = cli(&s.tcp, &["--json", "get", "/sensors"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["revision"].as_u64().unwrap() > 1, "{v}");
    assert!(v["value"]["temperature"].is_number(), "{v}");
}

#[tokio::test]
async fn websocket_carries_the_same_frames() {
    let s = spawn_server(&[]);
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}", s.ws)).await.unwrap();
    async fn roundtrip(
        ws: &mut tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>,
        frame: serde_json::Value,
    ) -> serde_json::Value {
        ws.send(Message::text(frame.to_string())).await.unwrap();
        loop {
            if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
                assert!(!t.ends_with('\n'));
                return serde_json::from_str(&t).unwrap();
            }
        }
    }

    let ack = roundtrip(&mut ws, serde_json::json!({"msg_id": 1, "kind": "AUTH", "payload": {"token": "dashboard-token"}})).await;
    assert_eq!(ack["kind"], "ACK");
    assert_eq!(ack["payload"]["msg_id"], 1);
    let got = roundtrip(&mut ws, serde_json::json!({"msg_id": 2, "kind": "GET", "payload": {"path": "/sensors/humidity"}})).await;
    assert_eq!(got["kind"], "ACK");
    assert_eq!(got["payload"]["value"], serde_json::json!(72.2));

    // A websocket subscriber sees writes made over TCP.
    let sub = roundtrip(&mut ws, serde_json::json!({"msg_id": 3, "kind": "SUBSCRIBE", "payload": {"path": "/leds/led1"}})).await;
    assert_eq!(sub["kind"], "ACK");
    assert!(cli(&s.tcp, &["put", "/leds/led1", "true"]).status.success());
    let mut values = Vec::new();
    while values.len() < 2 {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            let v: serde_json::Value = serde_json::from_str(&t).unwrap();
            assert_eq!(v["kind"], "EVENT");
            values.push(v["payload"]["value"].clone());
        }
    }
    assert_eq!(values, [serde_json::json!(false), serde_json::json!(true)]);
}
