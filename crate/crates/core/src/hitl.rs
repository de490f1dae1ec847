//! Human-in-the-loop correction: residual and teleoperation modes toggled by
//! a pedal, and the sources that feed human input into a rollout.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Side;
use crate::geometry::{Pose, Vec3};
use crate::kinematics::{
    ik_fingertips, BimanualState, HandModel, IkParams, FINGERS, HAND_JOINTS,
};

#[derive(Debug, Error)]
pub enum HitlError {
    #[error("invalid correction gains: {0}")]
    InvalidGains(String),
    #[error("{path}:{line}: {reason}")]
    MalformedScript {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("correction script is not ordered by tick at line {0}")]
    UnorderedScript(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("correction source disconnected")]
    CorrectionSourceDisconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    Residual,
    Teleop,
}

impl CorrectionMode {
    pub fn toggled(self) -> Self {
        match self {
            CorrectionMode::Residual => CorrectionMode::Teleop,
            CorrectionMode::Teleop => CorrectionMode::Residual,
        }
    }
}

/// Frame in which the human wrist delta is applied in residual mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaFrame {
    /// `a.pose ∘ Δp`, with `Δp` expressed in the reference wrist frame.
    #[default]
    Local,
    /// Translation delta added in world axes, rotation delta pre-multiplied.
    World,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionGains {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CorrectionGains {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.05,
        }
    }
}

impl CorrectionGains {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), HitlError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(HitlError::InvalidGains(format!("alpha = {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta < 0.1) {
            return Err(HitlError::InvalidGains(format!("beta = {} not in [0, 0.1)", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitlParams {
    pub gains: CorrectionGains,
    #[serde(default)]
    pub delta_frame: DeltaFrame,
    /// Scale from human fingertip positions to robot IK targets.
    #[serde(default = "unit")]
    pub gamma: f64,
    #[serde(default)]
    pub ik: IkParams,
}

fn unit() -> f64 {
    1.0
}

impl Default for HitlParams {
    fn default() -> Self {
        Self {
            gains: CorrectionGains::default(),
            delta_frame: DeltaFrame::Local,
            gamma: 1.0,
            ik: IkParams::default(),
        }
    }
}

/// One human hand sample: wrist pose in robot space and five fingertips in
/// the wrist frame (`[thumb, index, middle, ring, little]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanHand {
    pub wrist: Pose,
    pub tips: [Vec3; 5],
}

impl HumanHand {
    pub fn tips_flat(&self) -> [f64; 15] {
        let mut out = [0.0; 15];
        for (i, t) in self.tips.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(t.as_slice());
        }
        out
    }

    pub fn from_flat(wrist: Pose, tips: &[f64; 15]) -> Self {
        Self {
            wrist,
            tips: std::array::from_fn(|i| Vec3::new(tips[3 * i], tips[3 * i + 1], tips[3 * i + 2])),
        }
    }
}

/// Input delivered to a rollout for one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrectionEvent {
    Human { side: Side, hand: HumanHand },
    Pedal,
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

fn ik_targets(hand: &HumanHand, gamma: f64) -> [Vec3; FINGERS] {
    std::array::from_fn(|i| hand.tips[i] * gamma)
}

/// The correction state machine. It is owned by the rollout loop; the mode
/// changes only through [`HitlMachine::pedal`].
#[derive(Debug, Clone)]
pub struct HitlMachine {
    params: HitlParams,
    model: Arc<HandModel>,
    mode: CorrectionMode,
    now: [Option<HumanHand>; 2],
    reference: [Option<HumanHand>; 2],
    reference_joints: [Option<[f64; HAND_JOINTS]>; 2],
    robot_at_switch: Option<BimanualState>,
    last_commanded: Option<BimanualState>,
}

impl HitlMachine {
    pub fn new(params: HitlParams, model: Arc<HandModel>) -> Result<Self, HitlError> {
        params.gains.validate()?;
        Ok(Self {
            params,
            model,
            mode: CorrectionMode::Residual,
            now: [None; 2],
            reference: [None; 2],
            reference_joints: [None; 2],
            robot_at_switch: None,
            last_commanded: None,
        })
    }

    pub fn mode(&self) -> CorrectionMode {
        self.mode
    }

    pub fn params(&self) -> &HitlParams {
        &self.params
    }

    pub fn reference(&self, side: Side) -> Option<&HumanHand> {
        self.reference[side_index(side)].as_ref()
    }

    pub fn robot_at_switch(&self) -> Option<&BimanualState> {
        self.robot_at_switch.as_ref()
    }

    /// Records the latest human sample. The first sample of a side becomes
    /// its reference.
    pub fn observe_human(&mut self, side: Side, hand: HumanHand) {
        let i = side_index(side);
        self.now[i] = Some(hand);
        if self.reference[i].is_none() {
            self.set_reference(i, hand);
        }
    }

    fn set_reference(&mut self, i: usize, hand: HumanHand) {
        self.reference[i] = Some(hand);
        self.reference_joints[i] = None;
    }

    fn resnapshot(&mut self) {
        for i in 0..2 {
            if let Some(h) = self.now[i] {
                self.set_reference(i, h);
            }
        }
    }

    /// Toggles the mode. Entering teleop snapshots the robot at the last
    /// commanded action (or `fallback` if nothing was commanded yet) and the
    /// human reference; returning to residual re-snapshots the reference.
    pub fn pedal(&mut self, fallback: &BimanualState) -> CorrectionMode {
        self.mode = self.mode.toggled();
        if self.mode == CorrectionMode::Teleop {
            self.robot_at_switch = Some(self.last_commanded.unwrap_or(*fallback));
        }
        self.resnapshot();
        self.mode
    }

    pub fn apply(&mut self, event: CorrectionEvent, fallback: &BimanualState) {
        match event {
            CorrectionEvent::Human { side, hand } => self.observe_human(side, hand),
            CorrectionEvent::Pedal => {
                self.pedal(fallback);
            }
        }
    }

    /// Corrected action for this tick; also remembered as the last commanded
    /// action.
    pub fn correct(&mut self, raw: &BimanualState) -> BimanualState {
        let out = match self.mode {
            CorrectionMode::Residual => self.residual(raw),
            CorrectionMode::Teleop => self.teleop(raw),
        };
        self.last_commanded = Some(out);
        out
    }

    fn reference_ik(&mut self, i: usize) -> [f64; HAND_JOINTS] {
        if let Some(j) = self.reference_joints[i] {
            return j;
        }
        let hand = self.reference[i].expect("reference set before use");
        let j = ik_fingertips(
            &self.model,
            &ik_targets(&hand, self.params.gamma),
            &self.model.mid_range(),
            &self.params.ik,
        )
        .joints;
        self.reference_joints[i] = Some(j);
        j
    }

    fn residual(&mut self, raw: &BimanualState) -> BimanualState {
        let mut out = *raw;
        for side in Side::BOTH {
            let i = side_index(side);
            let (Some(now), Some(reference)) = (self.now[i], self.reference[i]) else {
                continue;
            };
            let arm = out.arm_mut(side);
            let alpha = self.params.gains.alpha;
            if alpha != 0.0 {
                arm.wrist = apply_delta(&arm.wrist, &reference.wrist, &now.wrist, alpha, self.params.delta_frame);
            }
            let beta = self.params.gains.beta;
            if beta != 0.0 {
                let j_ref = self.reference_ik(i);
                let j_now = ik_fingertips(
                    &self.model,
                    &ik_targets(&now, self.params.gamma),
                    &self.model.mid_range(),
                    &self.params.ik,
                )
                .joints;
                let moved: [f64; HAND_JOINTS] =
                    std::array::from_fn(|k| arm.joints[k] + beta * (j_now[k] - j_ref[k]));
                arm.joints = self.model.clamp(&moved);
            }
        }
        out
    }

    fn teleop(&self, raw: &BimanualState) -> BimanualState {
        let base = self.robot_at_switch.unwrap_or(*raw);
        let mut out = base;
        for side in Side::BOTH {
            let i = side_index(side);
            let (Some(now), Some(reference)) = (self.now[i], self.reference[i]) else {
                continue;
            };
            let arm = out.arm_mut(side);
            let snap = *base.arm(side);
            *arm = teleop_arm(&now, &reference, &snap, &self.model, &self.params);
        }
        out
    }
}

/// Applies the scaled human wrist delta `reference⁻¹ ∘ now` to `pose`.
pub fn apply_delta(pose: &Pose, reference: &Pose, now: &Pose, alpha: f64, frame: DeltaFrame) -> Pose {
    match frame {
        DeltaFrame::Local => {
            let delta = reference.inverse().compose(now);
            pose.compose(&delta.scale(alpha))
        }
        DeltaFrame::World => {
            let dr = (now.rotation() * reference.rotation().inverse()).powf(alpha);
            let dt = (now.translation() - reference.translation()) * alpha;
            Pose::new(dr * pose.rotation(), pose.translation() + dt)
        }
    }
}

/// Residual correction of a single bimanual action given one human sample
/// per side (`None` leaves that arm untouched).
pub fn residual_correct(
    action: &BimanualState,
    now: [Option<&HumanHand>; 2],
    reference: [Option<&HumanHand>; 2],
    model: Arc<HandModel>,
    params: &HitlParams,
) -> BimanualState {
    let mut m = HitlMachine {
        params: *params,
        model,
        mode: CorrectionMode::Residual,
        now: now.map(|h| h.copied()),
        reference: reference.map(|h| h.copied()),
        reference_joints: [None; 2],
        robot_at_switch: None,
        last_commanded: None,
    };
    m.residual(action)
}

/// Teleoperation target for one arm: the robot wrist follows the human
/// wrist delta since the switch, fingers track the human fingertips by IK.
pub fn teleop_arm(
    now: &HumanHand,
    reference: &HumanHand,
    robot_at_switch: &crate::kinematics::RobotArmState,
    model: &HandModel,
    params: &HitlParams,
) -> crate::kinematics::RobotArmState {
    let delta = reference.wrist.inverse().compose(&now.wrist);
    let joints = ik_fingertips(model, &ik_targets(now, params.gamma), &robot_at_switch.joints, &params.ik).joints;
    crate::kinematics::RobotArmState::new(robot_at_switch.wrist.compose(&delta), joints)
}

/// Supplies correction events to a rollout, one call per tick.
pub trait CorrectionSource: Send {
    fn poll(&mut self, tick: u64) -> Result<Vec<CorrectionEvent>, HitlError>;
}

/// One line of a scripted correction file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptLine {
    pub tick: u64,
    pub wrist: Pose,
    pub tips: [f64; 15],
    pub pedal: bool,
    #[serde(default = "right")]
    pub hand: Side,
}

fn right() -> Side {
    Side::Right
}

impl ScriptLine {
    /// Events in application order: the human sample, then the pedal press.
    pub fn events(&self) -> Vec<CorrectionEvent> {
        let mut out = vec![CorrectionEvent::Human {
            side: self.hand,
            hand: HumanHand::from_flat(self.wrist, &self.tips),
        }];
        if self.pedal {
            out.push(CorrectionEvent::Pedal);
        }
        out
    }
}

pub fn parse_script(text: &str, path: &str) -> Result<Vec<ScriptLine>, HitlError> {
    let mut lines = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: ScriptLine = serde_json::from_str(raw).map_err(|e| HitlError::MalformedScript {
            path: path.to_string(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        if !line.tips.iter().all(|v| v.is_finite()) {
            return Err(HitlError::MalformedScript {
                path: path.to_string(),
                line: n + 1,
                reason: "non-finite fingertip".into(),
            });
        }
        if lines.last().is_some_and(|l: &ScriptLine| l.tick > line.tick) {
            return Err(HitlError::UnorderedScript(n + 1));
        }
        lines.push(line);
    }
    Ok(lines)
}

pub fn write_script(lines: &[ScriptLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("script line serializes"));
        out.push('\n');
    }
    out
}

/// Replays a scripted correction file.
#[derive(Debug, Clone)]
pub struct ScriptedSource {
    lines: Vec<ScriptLine>,
    next: usize,
}

impl ScriptedSource {
    pub fn new(lines: Vec<ScriptLine>) -> Self {
        Self { lines, next: 0 }
    }

    pub fn load(path: &Path) -> Result<Self, HitlError> {
        let file = std::fs::File::open(path).map_err(|source| HitlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut text = String::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|source| HitlError::Io {
                path: path.display().to_string(),
                source,
            })?;
            text.push_str(&line);
            text.push('\n');
        }
        Ok(Self::new(parse_script(&text, &path.display().to_string())?))
    }
}

impl CorrectionSource for ScriptedSource {
    fn poll(&mut self, tick: u64) -> Result<Vec<CorrectionEvent>, HitlError> {
        let mut out = Vec::new();
        while let Some(l) = self.lines.get(self.next) {
            if l.tick > tick {
                break;
            }
            out.extend(l.events());
            self.next += 1;
        }
        Ok(out)
    }
}

/// An event from a live client. `tick` pins it to a specific rollout tick;
/// without it the event applies on the first tick after arrival.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueuedEvent {
    pub tick: Option<u64>,
    pub event: CorrectionEvent,
}

/// Receiving end of a live correction queue.
#[derive(Debug)]
pub struct ChannelSource {
    rx: mpsc::Receiver<QueuedEvent>,
    pending: BTreeMap<u64, Vec<CorrectionEvent>>,
    disconnected: bool,
}

impl ChannelSource {
    pub fn new() -> (mpsc::Sender<QueuedEvent>, Self) {
        let (tx, rx) = mpsc::channel();
        (
            tx,
            Self {
                rx,
                pending: BTreeMap::new(),
                disconnected: false,
            },
        )
    }
}

impl CorrectionSource for ChannelSource {
    fn poll(&mut self, tick: u64) -> Result<Vec<CorrectionEvent>, HitlError> {
        loop {
            match self.rx.try_recv() {
                Ok(q) => self
                    .pending
                    .entry(q.tick.unwrap_or(tick).max(tick))
                    .or_default()
                    .push(q.event),
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    self.disconnected = true;
                    break;
                }
            }
        }
        let mut out = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            if *entry.key() > tick {
                break;
            }
            out.extend(entry.remove());
        }
        if out.is_empty() && self.pending.is_empty() && self.disconnected {
            return Err(HitlError::CorrectionSourceDisconnected);
        }
        Ok(out)
    }
}
