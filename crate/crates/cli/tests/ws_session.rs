//! Live sessions against a server on an ephemeral port.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use branch_mpc::sim::{run_closed_loop, ScenarioConfig, SimLog};
use branch_mpc_cli::server::{self, session_log_path, ServerConfig};
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn validator() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/frames.schema.json");
        let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        jsonschema::validator_for(&schema).unwrap()
    })
}

async fn spawn_server(base: ScenarioConfig, log_dir: &Path, pace: f64) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let config = ServerConfig {
        base,
        log_dir: Some(log_dir.to_path_buf()),
        pace,
    };
    tokio::spawn(server::serve(listener, config));
    addr
}

async fn connect(addr: SocketAddr) -> Socket {
    connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn send(ws: &mut Socket, msg: Value) {
    ws.send(Message::Text(msg.to_string().into())).await.unwrap();
}

/// Next frame; every frame is checked against the published schema.
async fn next(ws: &mut Socket) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), ws.next())
            .await
            .expect("frame within 30 s")
            .expect("stream open")
            .unwrap();
        if let Message::Text(t) = msg {
            let v: Value = serde_json::from_str(t.as_str()).unwrap();
            let errors: Vec<String> = validator().iter_errors(&v).map(|e| e.to_string()).collect();
            assert!(errors.is_empty(), "frame {v} violates schema: {errors:?}");
            return v;
        }
    }
}

async fn next_of(ws: &mut Socket, kind: &str) -> Value {
    loop {
        let v = next(ws).await;
        if v["type"] == kind {
            return v;
        }
    }
}

/// Frames up to and including the metrics frame.
async fn until_metrics(ws: &mut Socket) -> Vec<Value> {
    let mut frames = Vec::new();
    loop {
        let v = next(ws).await;
        let done = v["type"] == "metrics";
        frames.push(v);
        if done {
            return frames;
        }
    }
}

async fn wait_for_file(path: &Path) -> PathBuf {
    for _ in 0..600 {
        if path.exists() {
            // the writer may still be flushing
            tokio::time::sleep(Duration::from_millis(100)).await;
            return path.to_path_buf();
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("{} never appeared", path.display());
}

fn read_log(path: &Path) -> SimLog {
    SimLog::read_jsonl(std::io::BufReader::new(std::fs::File::open(path).unwrap())).unwrap()
}

fn stop_policy() -> usize {
    ScenarioConfig::quadruped().policy_set().unwrap().find("stop").unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn every_control_step_yields_a_state_frame() {
    let dir = tempfile::tempdir().unwrap();
    let addr = spawn_server(ScenarioConfig::quadruped(), dir.path(), 1.0).await;
    let mut ws = connect(addr).await;
    send(&mut ws, json!({"type": "start", "overrides": {"duration": 1.0}})).await;
    let frames = until_metrics(&mut ws).await;

    let steps: Vec<u64> = frames
        .iter()
        .filter(|f| f["type"] == "state")
        .map(|f| f["step"].as_u64().unwrap())
        .collect();
    // initial state, then one record per step plus the final one
    let expected: Vec<u64> = std::iter::once(0).chain(0..=10).collect();
    assert_eq!(steps, expected);
    let trees = frames.iter().filter(|f| f["type"] == "tree").count();
    assert_eq!(trees, 10);
    assert_eq!(frames.last().unwrap()["steps"], 11);

    let log = read_log(&wait_for_file(&session_log_path(dir.path(), 0, 1)).await);
    assert_eq!(log.records.len(), 11);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stop_command_reaches_the_next_control_step() {
    let dir = tempfile::tempdir().unwrap();
    let addr = spawn_server(ScenarioConfig::quadruped(), dir.path(), 1.0).await;
    let mut ws = connect(addr).await;
    send(&mut ws, json!({"type": "start", "overrides": {"duration": 2.0}})).await;
    let stop = stop_policy();
    loop {
        let s = next_of(&mut ws, "state").await;
        assert_ne!(s["active_policy"], stop);
        if s["step"].as_u64().unwrap() >= 3 {
            break;
        }
    }
    send(&mut ws, json!({"type": "teleop", "command": "stop"})).await;
    let frames = until_metrics(&mut ws).await;
    let policies: Vec<u64> = frames
        .iter()
        .filter(|f| f["type"] == "state")
        .map(|f| f["active_policy"].as_u64().unwrap())
        .collect();
    let first = policies.iter().position(|&p| p == stop as u64).expect("stop visible in frames");
    assert!(policies[first..].iter().all(|&p| p == stop as u64));

    // the step that drained the command already runs under it
    let log = read_log(&wait_for_file(&session_log_path(dir.path(), 0, 1)).await);
    let applied: Vec<_> = log.records.iter().filter(|r| !r.teleop.is_empty()).collect();
    assert_eq!(applied.len(), 1);
    assert_eq!(applied[0].teleop[0].policy, Some(stop));
    assert_eq!(applied[0].active_policy, stop);
    let before = &log.records[applied[0].step - 1];
    assert_ne!(before.active_policy, stop);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn malformed_messages_get_error_frames_and_the_session_survives() {
    let dir = tempfile::tempdir().unwrap();
    let addr = spawn_server(ScenarioConfig::quadruped(), dir.path(), 1.0).await;
    let mut ws = connect(addr).await;
    ws.send(Message::Text("{not json".into())).await.unwrap();
    assert_eq!(next(&mut ws).await["type"], "error");
    send(&mut ws, json!({"type": "jump"})).await;
    assert_eq!(next(&mut ws).await["type"], "error");
    send(&mut ws, json!({"type": "teleop", "command": "stop"})).await;
    let e = next(&mut ws).await;
    assert!(e["msg"].as_str().unwrap().contains("start"), "{e}");
    send(&mut ws, json!({"type": "start", "overrides": {"planner": {"depht": 2}}})).await;
    let e = next(&mut ws).await;
    assert!(e["msg"].as_str().unwrap().contains("depht"), "{e}");

    send(&mut ws, json!({"type": "start", "overrides": {"duration": 0.5}})).await;
    assert_eq!(next(&mut ws).await["type"], "state");
    send(&mut ws, json!({"type": "set_param", "alpha": 1.5})).await;
    send(&mut ws, json!({"type": "teleop", "command": "lane_change"})).await;
    send(&mut ws, json!({"type": "teleop", "policy_id": 99})).await;
    send(&mut ws, json!({"type": "set_param", "alpha": 0.5})).await;
    let frames = until_metrics(&mut ws).await;
    let errors = frames.iter().filter(|f| f["type"] == "error").count();
    assert_eq!(errors, 3, "{frames:?}");
    assert!(frames.iter().filter(|f| f["type"] == "state").count() >= 5);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn pause_holds_the_clock_and_reset_rewinds() {
    let dir = tempfile::tempdir().unwrap();
    let addr = spawn_server(ScenarioConfig::quadruped(), dir.path(), 1.0).await;
    let mut ws = connect(addr).await;
    send(&mut ws, json!({"type": "start", "overrides": {"duration": 5.0}})).await;
    while next_of(&mut ws, "state").await["step"].as_u64().unwrap() < 2 {}
    send(&mut ws, json!({"type": "pause"})).await;
    // drain whatever was in flight, then expect silence
    tokio::time::sleep(Duration::from_millis(300)).await;
    let mut last = 0;
    while let Ok(Some(Ok(Message::Text(t)))) = tokio::time::timeout(Duration::from_millis(50), ws.next()).await {
        let v: Value = serde_json::from_str(t.as_str()).unwrap();
        if v["type"] == "state" {
            last = v["step"].as_u64().unwrap();
        }
    }
    assert!(
        tokio::time::timeout(Duration::from_millis(500), ws.next()).await.is_err(),
        "frames while paused"
    );
    send(&mut ws, json!({"type": "pause"})).await;
    let resumed = next_of(&mut ws, "state").await;
    assert!(resumed["step"].as_u64().unwrap() >= last);
    assert_eq!(resumed["paused"], false);

    send(&mut ws, json!({"type": "reset"})).await;
    let rewound = loop {
        let s = next_of(&mut ws, "state").await;
        if s["paused"] == true {
            break s;
        }
    };
    assert_eq!(rewound["step"], 0);
    assert_eq!(rewound["t"], 0.0);
    assert_eq!(rewound["ego"], json!(ScenarioConfig::quadruped().ego_init));
    // the first run's log is written when the reset replaces it
    let first = read_log(&wait_for_file(&session_log_path(dir.path(), 0, 1)).await);
    assert!(first.records.len() >= 3);
}

/// Runs a full session with the given overrides and returns the log path.
async fn scripted_session(addr: SocketAddr, overrides: Value) -> Vec<Value> {
    let mut ws = connect(addr).await;
    send(&mut ws, json!({"type": "start", "overrides": overrides})).await;
    until_metrics(&mut ws).await
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = ScenarioConfig::overtake();
    base.update_rule = branch_mpc::sim::UpdateRule::Sample;
    base.update_period = 1;
    base.duration = 1.0;
    let addr = spawn_server(base.clone(), dir.path(), 0.2).await;
    let (a, b) = tokio::join!(
        scripted_session(addr, json!({"seed": 1})),
        scripted_session(addr, json!({"seed": 2})),
    );
    assert_eq!(a.last().unwrap()["type"], "metrics");
    assert_eq!(b.last().unwrap()["type"], "metrics");

    let mut logs = Vec::new();
    for session in 0..2 {
        logs.push(read_log(&wait_for_file(&session_log_path(dir.path(), session, 1)).await));
    }
    logs.sort_by_key(|l| l.seed);
    for (log, seed) in logs.iter().zip([1, 2]) {
        assert_eq!(log.seed, seed);
        let steps: Vec<usize> = log.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, (0..=10).collect::<Vec<_>>());
        let mut c = base.clone();
        c.seed = seed;
        let offline = run_closed_loop(&c).unwrap();
        for (live, off) in log.records.iter().zip(&offline.records) {
            assert_eq!(live.ego, off.ego);
            assert_eq!(live.adversary, off.adversary);
            assert_eq!(live.active_policy, off.active_policy);
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn an_idle_client_does_not_stall_the_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let addr = spawn_server(ScenarioConfig::quadruped(), dir.path(), 0.05).await;
    let mut ws = connect(addr).await;
    send(&mut ws, json!({"type": "start", "overrides": {"duration": 4.0}})).await;
    // read nothing until the run is on disk
    let log = read_log(&wait_for_file(&session_log_path(dir.path(), 0, 1)).await);
    assert_eq!(log.records.len(), 41);
    let frames = until_metrics(&mut ws).await;
    let steps: Vec<u64> = frames
        .iter()
        .filter(|f| f["type"] == "state")
        .map(|f| f["step"].as_u64().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[1] >= w[0]));
}
