//! WebSocket session service.
//!
//! Each connection gets its own simulation, run on a blocking thread paced
//! at the control period. Frames go through a bounded queue that drops the
//! oldest frame when the client falls behind, so a slow client never stalls
//! the simulation. Teleop commands go straight into the simulation's
//! teleop queue.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use branch_mpc::policies::PolicySet;
use branch_mpc::risk::RiskSpec;
use branch_mpc::sim::{metrics, ScenarioConfig, ScenarioKind, Simulation, TeleopSender};
use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::net::TcpListener;
use tokio::sync::Notify;

use crate::config;
use crate::protocol::{teleop_command, ClientMessage, ServerFrame, TeleopName};

/// Frames held per session before the oldest is dropped.
pub const OUTBOX_CAPACITY: usize = 64;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Config every session starts from before its `start` overrides.
    pub base: ScenarioConfig,
    /// Directory for session logs; none disables them.
    pub log_dir: Option<PathBuf>,
    /// Multiplies the control period when pacing steps.
    pub pace: f64,
}

struct AppState {
    config: ServerConfig,
    sessions: AtomicU64,
}

pub fn router(config: ServerConfig) -> Router {
    let state = Arc::new(AppState {
        config,
        sessions: AtomicU64::new(0),
    });
    Router::new().route("/ws", get(upgrade)).with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, config: ServerConfig) -> std::io::Result<()> {
    axum::serve(listener, router(config)).await
}

/// Binds `addr` and serves.
pub async fn bind_and_serve(addr: SocketAddr, config: ServerConfig) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    eprintln!("listening on ws://{}/ws", listener.local_addr()?);
    serve(listener, config).await
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    let id = state.sessions.fetch_add(1, Ordering::Relaxed);
    ws.on_upgrade(move |socket| session(socket, id, state))
}

/// Bounded frame queue; pushing never blocks.
struct Outbox {
    queue: Mutex<OutboxState>,
    notify: Notify,
}

#[derive(Default)]
struct OutboxState {
    frames: VecDeque<String>,
    dropped: u64,
    closed: bool,
}

impl Outbox {
    fn new() -> Self {
        Self {
            queue: Mutex::new(OutboxState::default()),
            notify: Notify::new(),
        }
    }

    fn push(&self, frame: &ServerFrame) {
        let mut q = self.queue.lock().expect("outbox lock");
        if q.frames.len() == OUTBOX_CAPACITY {
            q.frames.pop_front();
            q.dropped += 1;
        }
        q.frames.push_back(frame.to_json());
        drop(q);
        self.notify.notify_one();
    }

    fn close(&self) {
        self.queue.lock().expect("outbox lock").closed = true;
        self.notify.notify_one();
    }

    /// Next frame, or `None` once closed and drained.
    async fn pop(&self) -> Option<String> {
        loop {
            {
                let mut q = self.queue.lock().expect("outbox lock");
                if let Some(f) = q.frames.pop_front() {
                    return Some(f);
                }
                if q.closed {
                    return None;
                }
            }
            self.notify.notified().await;
        }
    }
}

enum Control {
    Start(Box<ScenarioConfig>),
    SetAlpha(f64),
    Pause,
    Reset,
}

/// Teleop endpoint of the live simulation, shared with the reader.
type TeleopSlot = Arc<Mutex<Option<(TeleopSender, PolicySet)>>>;

async fn session(socket: WebSocket, id: u64, state: Arc<AppState>) {
    let (mut sink, mut stream) = socket.split();
    let outbox = Arc::new(Outbox::new());
    let teleop: TeleopSlot = Arc::new(Mutex::new(None));
    let (ctrl_tx, ctrl_rx) = mpsc::channel();

    let writer = {
        let outbox = outbox.clone();
        tokio::spawn(async move {
            while let Some(frame) = outbox.pop().await {
                if sink.send(Message::Text(frame.into())).await.is_err() {
                    break;
                }
            }
            let _ = sink.close().await;
        })
    };
    let worker = {
        let outbox = outbox.clone();
        let teleop = teleop.clone();
        let log_dir = state.config.log_dir.clone();
        let pace = state.config.pace;
        tokio::task::spawn_blocking(move || {
            Worker {
                session: id,
                outbox,
                teleop,
                log_dir,
                pace,
                live: None,
                runs: 0,
            }
            .run(ctrl_rx)
        })
    };

    let base = serde_json::to_value(&state.config.base).expect("config serializes");
    let mut started = false;
    while let Some(msg) = stream.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(Message::Binary(_)) => {
                outbox.push(&ServerFrame::error("binary frames are not supported"));
                continue;
            }
            Ok(_) => continue,
        };
        let reply = match ClientMessage::parse(text.as_str()) {
            Err(e) => Err(e),
            Ok(ClientMessage::Start { overrides }) => start_config(&base, &overrides, &state.config.base).map(|c| {
                started = true;
                Some(Control::Start(Box::new(c)))
            }),
            Ok(_) if !started => Err("no simulation; send start first".into()),
            Ok(ClientMessage::Teleop { policy_id, command }) => send_teleop(&teleop, policy_id, command).map(|()| None),
            Ok(ClientMessage::SetParam { alpha }) => RiskSpec::cvar(alpha)
                .map(|_| Some(Control::SetAlpha(alpha)))
                .map_err(|e| e.to_string()),
            Ok(ClientMessage::Pause {}) => Ok(Some(Control::Pause)),
            Ok(ClientMessage::Reset {}) => Ok(Some(Control::Reset)),
        };
        match reply {
            Ok(Some(control)) => {
                if ctrl_tx.send(control).is_err() {
                    break;
                }
            }
            Ok(None) => {}
            Err(msg) => outbox.push(&ServerFrame::error(msg)),
        }
    }
    drop(ctrl_tx);
    let _ = worker.await;
    outbox.close();
    let _ = writer.await;
}

fn start_config(base: &Value, overrides: &Value, fallback: &ScenarioConfig) -> Result<ScenarioConfig, String> {
    let mut patch = base.clone();
    if let Value::Object(o) = overrides {
        // a different scenario starts from that scenario's preset
        let kind = |v: &Value| v.as_str().and_then(ScenarioKind::from_name);
        if o.get("kind").is_some_and(|k| kind(k) != kind(&base["kind"])) {
            patch = Value::Object(Default::default());
        }
        config::merge(&mut patch, overrides);
    } else if !overrides.is_null() {
        return Err("overrides must be an object".into());
    }
    config::from_patch(&patch, fallback.kind).map_err(|e| e.to_string())
}

fn send_teleop(
    slot: &TeleopSlot,
    policy_id: Option<usize>,
    command: Option<TeleopName>,
) -> Result<(), String> {
    let command = teleop_command(policy_id, command)?;
    let guard = slot.lock().expect("teleop lock");
    let Some((tx, policies)) = guard.as_ref() else {
        return Err("no simulation; send start first".into());
    };
    command.resolve(policies).map_err(|e| e.to_string())?;
    tx.send(command).map_err(|e| e.to_string())
}

struct Live {
    sim: Simulation,
    paused: bool,
    /// Records already streamed.
    cursor: usize,
    next_tick: Instant,
    saved: bool,
}

struct Worker {
    session: u64,
    outbox: Arc<Outbox>,
    teleop: TeleopSlot,
    log_dir: Option<PathBuf>,
    pace: f64,
    live: Option<Live>,
    runs: u32,
}

impl Worker {
    fn run(mut self, ctrl: mpsc::Receiver<Control>) {
        loop {
            let wait = match &self.live {
                Some(l) if !l.paused && !l.sim.is_finished() => l.next_tick.saturating_duration_since(Instant::now()),
                _ => Duration::from_secs(3600),
            };
            match ctrl.recv_timeout(wait) {
                Ok(c) => self.handle(c),
                Err(RecvTimeoutError::Timeout) => self.tick(),
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        self.save();
    }

    fn period(sim: &Simulation) -> Duration {
        Duration::from_secs_f64(sim.config().planner.dt)
    }

    fn launch(&mut self, config: ScenarioConfig, paused: bool) {
        self.save();
        match Simulation::with_teleop(config) {
            Ok((sim, tx)) => {
                *self.teleop.lock().expect("teleop lock") = Some((tx, sim.policies().clone()));
                self.runs += 1;
                self.outbox.push(&ServerFrame::State {
                    t: sim.time(),
                    step: sim.steps_taken(),
                    ego: sim.ego().iter().copied().collect(),
                    adversary: sim.adversary().iter().copied().collect(),
                    active_policy: sim.active_policy(),
                    paused,
                });
                self.live = Some(Live {
                    sim,
                    paused,
                    cursor: 0,
                    next_tick: Instant::now(),
                    saved: false,
                });
            }
            Err(e) => {
                self.live = None;
                self.outbox.push(&ServerFrame::error(e.to_string()));
            }
        }
    }

    fn handle(&mut self, control: Control) {
        match control {
            Control::Start(config) => self.launch(*config, false),
            Control::Reset => match &self.live {
                Some(l) => {
                    let config = l.sim.config().clone();
                    self.launch(config, true);
                }
                None => self.outbox.push(&ServerFrame::error("nothing to reset")),
            },
            Control::Pause => {
                if let Some(l) = &mut self.live {
                    l.paused = !l.paused;
                    l.next_tick = Instant::now();
                }
            }
            Control::SetAlpha(alpha) => {
                if let Some(l) = &mut self.live {
                    if let Err(e) = l.sim.set_alpha(alpha) {
                        self.outbox.push(&ServerFrame::error(e.to_string()));
                    }
                }
            }
        }
    }

    fn tick(&mut self) {
        let Some(l) = &mut self.live else { return };
        let period = Self::period(&l.sim).mul_f64(self.pace);
        l.next_tick += period;
        let now = Instant::now();
        if l.next_tick < now {
            l.next_tick = now;
        }
        if let Err(e) = l.sim.step() {
            self.outbox.push(&ServerFrame::error(format!("simulation stopped: {e}")));
            l.paused = true;
            return;
        }
        let records = &l.sim.log().records;
        for r in &records[l.cursor..] {
            self.outbox.push(&ServerFrame::state(r, l.paused));
            if let Some(tree) = ServerFrame::tree(r) {
                self.outbox.push(&tree);
            }
            if let Some(e) = &r.error {
                self.outbox.push(&ServerFrame::error(format!("step {}: {e}", r.step)));
            }
        }
        l.cursor = records.len();
        if l.sim.is_finished() {
            match metrics(l.sim.log()) {
                Ok(m) => self.outbox.push(&ServerFrame::Metrics { metrics: m }),
                Err(e) => self.outbox.push(&ServerFrame::error(e.to_string())),
            }
            self.save();
        }
    }

    /// Writes the live run's log once.
    fn save(&mut self) {
        let (Some(dir), Some(l)) = (&self.log_dir, &mut self.live) else { return };
        if l.saved || l.sim.log().records.is_empty() {
            return;
        }
        l.saved = true;
        let path = session_log_path(dir, self.session, self.runs);
        let result = std::fs::create_dir_all(dir)
            .and_then(|()| std::fs::File::create(&path))
            .and_then(|f| l.sim.log().write_jsonl(std::io::BufWriter::new(f)));
        if let Err(e) = result {
            self.outbox.push(&ServerFrame::error(format!("cannot write {}: {e}", path.display())));
        }
    }
}

/// `session-<id>-run-<n>.jsonl` inside `dir`.
pub fn session_log_path(dir: &Path, session: u64, run: u32) -> PathBuf {
    dir.join(format!("session-{session}-run-{run}.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn outbox_drops_the_oldest_frame() {
        let outbox = Outbox::new();
        for i in 0..OUTBOX_CAPACITY + 5 {
            outbox.push(&ServerFrame::error(i.to_string()));
        }
        let q = outbox.queue.lock().unwrap();
        assert_eq!(q.frames.len(), OUTBOX_CAPACITY);
        assert_eq!(q.dropped, 5);
        assert!(q.frames[0].contains("\"5\""));
    }

    #[test]
    fn start_overrides_merge_onto_the_base() {
        let base_config = ScenarioConfig::quadruped();
        let base = serde_json::to_value(&base_config).unwrap();
        let c = start_config(&base, &json!({"seed": 11}), &base_config).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.kind, ScenarioKind::QuadrupedWaypoint);
        let c = start_config(&base, &json!({"kind": "merge"}), &base_config).unwrap();
        assert_eq!(c, ScenarioConfig::merge());
        assert!(start_config(&base, &json!({"planner": {"risk": {"alpha": 2.0}}}), &base_config).is_err());
        assert!(start_config(&base, &json!([1]), &base_config).is_err());
    }
}
