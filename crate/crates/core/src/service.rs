//! Live rollout service speaking the `dexpipe/1` WebSocket protocol.
//!
//! A single control thread owns the active rollout. Network tasks forward
//! client requests to it over one inbox queue and receive plant updates over
//! a broadcast queue; a slow client only ever loses broadcasts.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc as std_mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, oneshot};
use tokio_tungstenite::tungstenite::Message;

use crate::calibration::Side;
use crate::config::{correction_meta, PipelineConfig, PolicyKind, RolloutSetup};
use crate::control::{LogEntry, Rollout};
use crate::dataset::{export_dataset, import_dataset, Dataset, DatasetKind};
use crate::geometry::Pose;
use crate::hitl::{ChannelSource, CorrectionEvent, CorrectionMode, HumanHand, QueuedEvent};
use crate::kinematics::{HandModel, RobotArmState};
use crate::perception::ObsTensor;

pub const PROTOCOL: &str = "dexpipe/1";
/// Largest number of cloud points carried by one `state_update`.
pub const MAX_BROADCAST_POINTS: usize = 500;

const BROADCAST_CAPACITY: usize = 64;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: String,
    /// 0 picks a free port.
    pub port: u16,
    pub dataset: Option<PathBuf>,
    pub policy: PolicyKind,
    pub pipeline: PipelineConfig,
    /// Tick rate of the control loop; defaults to the controller rate.
    pub clock_hz: Option<f64>,
    /// Where `save_d_prime` writes when the request names no path.
    pub d_prime_path: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8765,
            dataset: None,
            policy: PolicyKind::Replay,
            pipeline: PipelineConfig::default(),
            clock_hz: None,
            d_prime_path: PathBuf::from("d_prime.dxd"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Running,
    Paused,
    Saved,
}

/// Wire envelope shared by both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: String,
    pub seq: u64,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Correction,
    Viewer,
}

#[derive(Debug, Clone, Deserialize)]
struct HelloPayload {
    role: Role,
    #[serde(default)]
    protocol: Option<String>,
}

/// Payload of `start_rollout`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StartRollout {
    pub dataset: Option<PathBuf>,
    pub policy: Option<PolicyKind>,
    pub init_demo: usize,
    /// Stop (pause) after this many ticks.
    pub ticks: Option<u64>,
    /// Start paused; nothing ticks until `resume`.
    pub paused: bool,
}

/// Payload of `correction_input`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionInput {
    #[serde(default = "default_hand")]
    pub hand: Side,
    pub wrist: Pose,
    pub tips: [f64; 15],
    /// Rollout tick to apply the sample on; absent means the next tick.
    #[serde(default)]
    pub tick: Option<u64>,
}

fn default_hand() -> Side {
    Side::Right
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PedalInput {
    pub tick: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct SavePayload {
    path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    BadSeq,
    UnknownType,
    ProtocolMismatch,
    HelloRequired,
    CorrectionClientTaken,
    NotCorrectionClient,
    PhaseMismatch,
    StartFailed,
    SaveFailed,
}

#[derive(Debug, Clone)]
struct Reject {
    code: ErrorCode,
    message: String,
}

impl Reject {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type Reply = oneshot::Sender<Result<Value, Reject>>;

enum Request {
    Register { client: u64, role: Role, reply: Reply },
    Unregister { client: u64 },
    Start { body: StartRollout, reply: Reply },
    Correction { client: u64, event: QueuedEvent, reply: Reply },
    Pause { reply: Reply },
    Resume { reply: Reply },
    Save { path: Option<PathBuf>, reply: Reply },
    Shutdown,
}

/// A running service. Dropping the handle does not stop it; call
/// [`ServiceHandle::shutdown`].
pub struct ServiceHandle {
    pub addr: SocketAddr,
    inbox: std_mpsc::Sender<Request>,
    control: Option<std::thread::JoinHandle<()>>,
    acceptor: tokio::task::JoinHandle<()>,
}

impl ServiceHandle {
    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    pub async fn shutdown(mut self) {
        let _ = self.inbox.send(Request::Shutdown);
        self.acceptor.abort();
        if let Some(h) = self.control.take() {
            let _ = tokio::task::spawn_blocking(move || h.join()).await;
        }
    }

    /// Runs until the acceptor stops.
    pub async fn wait(self) {
        let _ = self.acceptor.await;
    }
}

/// Binds the listener and starts the control thread and the acceptor. Must
/// be called from within a Tokio runtime.
pub async fn serve(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    config
        .pipeline
        .validate()
        .map_err(|e| ServiceError::BadConfig(e.to_string()))?;
    if let Some(hz) = config.clock_hz {
        if !(hz.is_finite() && hz > 0.0) {
            return Err(ServiceError::BadConfig(format!("clock_hz = {hz}")));
        }
    }
    let model = Arc::new(
        config
            .pipeline
            .hand_model()
            .map_err(|e| ServiceError::BadConfig(e.to_string()))?,
    );
    let listener = match TcpListener::bind((config.bind.as_str(), config.port)).await {
        Ok(l) => l,
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => return Err(ServiceError::PortInUse(config.port)),
        Err(e) => return Err(e.into()),
    };
    let addr = listener.local_addr()?;
    let (inbox, rx) = std_mpsc::channel();
    let (updates, _) = broadcast::channel(BROADCAST_CAPACITY);
    let loop_updates = updates.clone();
    let control = std::thread::Builder::new()
        .name("dexpipe-control".into())
        .spawn(move || ControlLoop::new(config, model, loop_updates).run(rx))?;
    let acceptor_inbox = inbox.clone();
    let acceptor = tokio::spawn(async move {
        let mut next_id = 0u64;
        while let Ok((stream, peer)) = listener.accept().await {
            next_id += 1;
            log::info!("client {next_id} connected from {peer}");
            tokio::spawn(client_task(stream, next_id, acceptor_inbox.clone(), updates.subscribe()));
        }
    });
    log::info!("serving {PROTOCOL} on ws://{addr}");
    Ok(ServiceHandle {
        addr,
        inbox,
        control: Some(control),
        acceptor,
    })
}

struct Outbound {
    seq: u64,
}

impl Outbound {
    fn frame(&mut self, kind: &str, payload: Value) -> Message {
        self.seq += 1;
        let env = Envelope {
            kind: kind.to_string(),
            seq: self.seq,
            payload,
        };
        Message::text(serde_json::to_string(&env).expect("envelope serializes"))
    }

    fn error(&mut self, reject: &Reject, in_reply_to: Option<u64>) -> Message {
        self.frame(
            "error",
            json!({ "code": reject.code, "message": reject.message, "in_reply_to": in_reply_to }),
        )
    }
}

async fn ask(inbox: &std_mpsc::Sender<Request>, build: impl FnOnce(Reply) -> Request) -> Result<Value, Reject> {
    let (tx, rx) = oneshot::channel();
    if inbox.send(build(tx)).is_err() {
        return Err(Reject::new(ErrorCode::PhaseMismatch, "service is shutting down"));
    }
    rx.await
        .unwrap_or_else(|_| Err(Reject::new(ErrorCode::PhaseMismatch, "service is shutting down")))
}

fn parse<T: for<'de> Deserialize<'de>>(payload: Value) -> Result<T, Reject> {
    serde_json::from_value(payload).map_err(|e| Reject::new(ErrorCode::BadMessage, e.to_string()))
}

async fn handle(env: Envelope, client: u64, hello_done: &mut bool, inbox: &std_mpsc::Sender<Request>) -> Result<(String, Value), Reject> {
    if env.kind != "hello" && !*hello_done {
        if is_known(&env.kind) {
            return Err(Reject::new(ErrorCode::HelloRequired, "send hello first"));
        }
        return Err(Reject::new(ErrorCode::UnknownType, format!("unknown message type '{}'", env.kind)));
    }
    let kind = env.kind.clone();
    let value = match env.kind.as_str() {
        "hello" => {
            let h: HelloPayload = parse(env.payload)?;
            if let Some(p) = &h.protocol {
                if p != PROTOCOL {
                    return Err(Reject::new(
                        ErrorCode::ProtocolMismatch,
                        format!("server speaks {PROTOCOL}, client asked for {p}"),
                    ));
                }
            }
            let v = ask(inbox, |reply| Request::Register { client, role: h.role, reply }).await?;
            *hello_done = true;
            v
        }
        "start_rollout" => {
            let body: StartRollout = parse(env.payload)?;
            ask(inbox, |reply| Request::Start { body, reply }).await?
        }
        "correction_input" => {
            let c: CorrectionInput = parse(env.payload)?;
            if !c.tips.iter().all(|v| v.is_finite()) {
                return Err(Reject::new(ErrorCode::BadMessage, "non-finite fingertip"));
            }
            let event = QueuedEvent {
                tick: c.tick,
                event: CorrectionEvent::Human {
                    side: c.hand,
                    hand: HumanHand::from_flat(c.wrist, &c.tips),
                },
            };
            ask(inbox, |reply| Request::Correction { client, event, reply }).await?
        }
        "pedal" => {
            let p: PedalInput = parse(env.payload)?;
            let event = QueuedEvent {
                tick: p.tick,
                event: CorrectionEvent::Pedal,
            };
            ask(inbox, |reply| Request::Correction { client, event, reply }).await?
        }
        "pause" => ask(inbox, |reply| Request::Pause { reply }).await?,
        "resume" => ask(inbox, |reply| Request::Resume { reply }).await?,
        "save_d_prime" => {
            let s: SavePayload = parse(env.payload)?;
            ask(inbox, |reply| Request::Save { path: s.path, reply }).await?
        }
        other => return Err(Reject::new(ErrorCode::UnknownType, format!("unknown message type '{other}'"))),
    };
    Ok((kind, value))
}

fn is_known(kind: &str) -> bool {
    matches!(
        kind,
        "hello" | "start_rollout" | "correction_input" | "pedal" | "pause" | "resume" | "save_d_prime"
    )
}

async fn client_task(
    stream: TcpStream,
    client: u64,
    inbox: std_mpsc::Sender<Request>,
    mut updates: broadcast::Receiver<Arc<Value>>,
) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("client {client}: handshake failed: {e}");
            return;
        }
    };
    let (mut sink, mut stream) = ws.split();
    let mut out = Outbound { seq: 0 };
    let mut last_in: Option<u64> = None;
    let mut hello_done = false;
    loop {
        tokio::select! {
            incoming = stream.next() => {
                let Some(Ok(msg)) = incoming else { break };
                let text = match msg {
                    Message::Text(t) => t.to_string(),
                    Message::Close(_) => break,
                    Message::Ping(_) | Message::Pong(_) | Message::Frame(_) => continue,
                    Message::Binary(_) => {
                        let r = Reject::new(ErrorCode::BadMessage, "binary frames are not part of the protocol");
                        if sink.send(out.error(&r, None)).await.is_err() { break }
                        continue;
                    }
                };
                let env: Envelope = match serde_json::from_str(&text) {
                    Ok(e) => e,
                    Err(e) => {
                        let r = Reject::new(ErrorCode::BadMessage, e.to_string());
                        if sink.send(out.error(&r, None)).await.is_err() { break }
                        continue;
                    }
                };
                let seq = env.seq;
                let reply = if last_in.is_some_and(|l| seq <= l) {
                    Err(Reject::new(ErrorCode::BadSeq, format!("seq {seq} does not increase")))
                } else {
                    last_in = Some(seq);
                    handle(env, client, &mut hello_done, &inbox).await
                };
                let frame = match reply {
                    Ok((kind, mut value)) => {
                        if let Value::Object(m) = &mut value {
                            m.insert("in_reply_to".into(), json!(seq));
                        }
                        out.frame(&kind, value)
                    }
                    Err(r) => out.error(&r, Some(seq)),
                };
                if sink.send(frame).await.is_err() { break }
            }
            update = updates.recv() => {
                match update {
                    Ok(v) => {
                        if !hello_done { continue }
                        if sink.send(out.frame("state_update", (*v).clone())).await.is_err() { break }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::debug!("client {client} dropped {n} state updates");
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        }
    }
    let _ = inbox.send(Request::Unregister { client });
    log::info!("client {client} disconnected");
}

struct Active {
    rollout: Rollout,
    corrections: std_mpsc::Sender<QueuedEvent>,
    init_demo: usize,
    k: usize,
    stop_after: Option<u64>,
}

struct ControlLoop {
    config: ServiceConfig,
    model: Arc<HandModel>,
    updates: broadcast::Sender<Arc<Value>>,
    phase: Phase,
    correction_client: Option<u64>,
    active: Option<Active>,
    period: Duration,
}

fn arm_json(a: &RobotArmState) -> Value {
    json!({ "wrist": a.wrist.to_pose7(), "joints": a.joints })
}

/// Every `ceil(K / max)`-th row of an observation, at most `max` rows.
pub fn decimate(obs: &ObsTensor, max: usize) -> Vec<[f32; 6]> {
    if obs.k() == 0 || max == 0 {
        return Vec::new();
    }
    let stride = obs.k().div_ceil(max);
    obs.rows()
        .step_by(stride)
        .map(|r| [r[0], r[1], r[2], r[3], r[4], r[5]])
        .collect()
}

/// The `state_update` payload for one logged tick.
pub fn state_update_payload(entry: &LogEntry, phase: Phase, cloud: &ObsTensor) -> Value {
    json!({
        "tick": entry.tick,
        "phase": phase,
        "mode": entry.mode.unwrap_or(CorrectionMode::Residual),
        "state": { "left": arm_json(&entry.state.left), "right": arm_json(&entry.state.right) },
        "command": {
            "left": arm_json(&entry.corrected_action.left),
            "right": arm_json(&entry.corrected_action.right),
        },
        "query": entry.query_flag,
        "cloud": decimate(cloud, MAX_BROADCAST_POINTS),
    })
}

impl ControlLoop {
    fn new(config: ServiceConfig, model: Arc<HandModel>, updates: broadcast::Sender<Arc<Value>>) -> Self {
        let hz = config.clock_hz.unwrap_or(config.pipeline.controller.rate);
        Self {
            config,
            model,
            updates,
            phase: Phase::Idle,
            correction_client: None,
            active: None,
            period: Duration::from_secs_f64(1.0 / hz),
        }
    }

    fn status(&self) -> Value {
        json!({
            "protocol": PROTOCOL,
            "phase": self.phase,
            "tick": self.active.as_ref().map(|a| a.rollout.plant().tick),
        })
    }

    fn run(mut self, rx: std_mpsc::Receiver<Request>) {
        let mut next_tick = Instant::now();
        loop {
            let request = if self.phase == Phase::Running {
                let wait = next_tick.saturating_duration_since(Instant::now());
                match rx.recv_timeout(wait) {
                    Ok(r) => Some(r),
                    Err(std_mpsc::RecvTimeoutError::Timeout) => None,
                    Err(std_mpsc::RecvTimeoutError::Disconnected) => return,
                }
            } else {
                match rx.recv() {
                    Ok(r) => Some(r),
                    Err(_) => return,
                }
            };
            if let Some(r) = request {
                let was_running = self.phase == Phase::Running;
                if !self.dispatch(r) {
                    return;
                }
                if !was_running && self.phase == Phase::Running {
                    next_tick = Instant::now();
                }
                continue;
            }
            self.tick();
            next_tick += self.period;
            let now = Instant::now();
            if next_tick < now {
                next_tick = now;
            }
        }
    }

    fn tick(&mut self) {
        let Some(active) = self.active.as_mut() else {
            self.phase = Phase::Idle;
            return;
        };
        match active.rollout.tick() {
            Ok(entry) => {
                let done = active.stop_after.is_some_and(|n| entry.tick + 1 >= n);
                if done {
                    self.phase = Phase::Paused;
                }
                let cloud = active.rollout.observe();
                let payload = state_update_payload(&entry, self.phase, &cloud);
                let _ = self.updates.send(Arc::new(payload));
            }
            Err(e) => {
                log::error!("rollout stopped: {e}");
                self.phase = Phase::Paused;
            }
        }
    }

    fn dispatch(&mut self, request: Request) -> bool {
        match request {
            Request::Register { client, role, reply } => {
                let r = if role == Role::Correction {
                    match self.correction_client {
                        Some(c) if c != client => Err(Reject::new(
                            ErrorCode::CorrectionClientTaken,
                            "another correction client is connected",
                        )),
                        _ => {
                            self.correction_client = Some(client);
                            Ok(())
                        }
                    }
                } else {
                    Ok(())
                };
                let _ = reply.send(r.map(|_| {
                    let mut v = self.status();
                    v["role"] = json!(role);
                    v
                }));
            }
            Request::Unregister { client } => {
                if self.correction_client == Some(client) {
                    self.correction_client = None;
                }
            }
            Request::Start { body, reply } => {
                let r = self.start(body);
                let _ = reply.send(r);
            }
            Request::Correction { client, event, reply } => {
                let r = if self.correction_client != Some(client) {
                    Err(Reject::new(ErrorCode::NotCorrectionClient, "hello with role 'correction' first"))
                } else if !matches!(self.phase, Phase::Running | Phase::Paused) {
                    Err(Reject::new(ErrorCode::PhaseMismatch, format!("no rollout in phase {:?}", self.phase)))
                } else {
                    let active = self.active.as_ref().expect("rollout exists while running or paused");
                    let _ = active.corrections.send(event);
                    Ok(json!({ "queued": true, "tick": event.tick.unwrap_or(active.rollout.plant().tick) }))
                };
                let _ = reply.send(r);
            }
            Request::Pause { reply } => {
                let r = if self.phase == Phase::Running {
                    self.phase = Phase::Paused;
                    Ok(self.status())
                } else {
                    Err(Reject::new(ErrorCode::PhaseMismatch, "not running"))
                };
                let _ = reply.send(r);
            }
            Request::Resume { reply } => {
                let finished = self
                    .active
                    .as_ref()
                    .is_some_and(|a| a.stop_after.is_some_and(|n| a.rollout.plant().tick >= n));
                let r = if self.phase == Phase::Paused && !finished {
                    self.phase = Phase::Running;
                    Ok(self.status())
                } else {
                    Err(Reject::new(ErrorCode::PhaseMismatch, "nothing to resume"))
                };
                let _ = reply.send(r);
            }
            Request::Save { path, reply } => {
                let r = self.save(path);
                let _ = reply.send(r);
            }
            Request::Shutdown => return false,
        }
        true
    }

    fn start(&mut self, body: StartRollout) -> Result<Value, Reject> {
        if matches!(self.phase, Phase::Running | Phase::Paused) {
            return Err(Reject::new(ErrorCode::PhaseMismatch, "a rollout is already active"));
        }
        let fail = |m: String| Reject::new(ErrorCode::StartFailed, m);
        let path = body
            .dataset
            .or_else(|| self.config.dataset.clone())
            .ok_or_else(|| fail("no dataset given".into()))?;
        let dataset = import_dataset(&path).map_err(|e| fail(e.to_string()))?;
        let k = dataset.k();
        let setup = RolloutSetup::from_dataset(
            dataset,
            body.policy.unwrap_or(self.config.policy),
            body.init_demo,
            &self.config.pipeline,
            self.model.clone(),
        )
        .map_err(|e| fail(e.to_string()))?;
        let (tx, source) = ChannelSource::new();
        let rollout = setup.corrected_rollout(Box::new(source)).map_err(|e| fail(e.to_string()))?;
        self.active = Some(Active {
            rollout,
            corrections: tx,
            init_demo: body.init_demo,
            k,
            stop_after: body.ticks,
        });
        self.phase = if body.paused || body.ticks == Some(0) {
            Phase::Paused
        } else {
            Phase::Running
        };
        let mut v = self.status();
        v["k"] = json!(k);
        Ok(v)
    }

    fn save(&mut self, path: Option<PathBuf>) -> Result<Value, Reject> {
        if !matches!(self.phase, Phase::Running | Phase::Paused) {
            return Err(Reject::new(ErrorCode::PhaseMismatch, "no rollout to save"));
        }
        let mut active = self.active.take().expect("rollout exists while running or paused");
        let path = path.unwrap_or_else(|| self.config.d_prime_path.clone());
        let mut ds = Dataset::new(DatasetKind::Correction, active.k);
        let ticks = active.rollout.plant().tick;
        if let Some(demo) = active.rollout.take_recording(correction_meta(active.init_demo)) {
            ds.push_demo(demo)
                .map_err(|e| Reject::new(ErrorCode::SaveFailed, e.to_string()))?;
        }
        export_dataset(&ds, &path).map_err(|e| Reject::new(ErrorCode::SaveFailed, e.to_string()))?;
        self.phase = Phase::Saved;
        Ok(json!({
            "phase": self.phase,
            "path": path.display().to_string(),
            "demos": ds.demos().len(),
            "steps": ds.step_count(),
            "ticks": ticks,
        }))
    }
}
