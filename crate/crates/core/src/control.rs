//! Goal-interpolating position controller on a kinematic plant, and the
//! rollout loop that drives it from a policy.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Demo, DemoMeta, Step};
use crate::geometry::{pose_distance, PointCloud, Pose};
use crate::hitl::{CorrectionMode, CorrectionSource, HitlError, HitlMachine};
use crate::kinematics::{BimanualState, HandModel, RobotArmState, HAND_JOINTS};
use crate::perception::{merge_robot_points, LinkGeometry, ObsTensor};
use crate::policy::{Observation, Policy, PolicyError};

// Distances within this of the per-tick step count as arrival.
const ARRIVAL_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid controller parameters: {0}")]
    InvalidParams(String),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Correction(#[from] HitlError),
    #[error("policy returned an empty chunk")]
    EmptyChunk,
    #[error("non-finite goal at tick {0}")]
    NonFiniteGoal(u64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Control rate, Hz.
    pub rate: f64,
    /// Wrist speed limit, m/s.
    pub v_max: f64,
    /// Wrist angular speed limit, rad/s.
    pub omega_max: f64,
    /// Hand joint speed limit, rad/s.
    pub dq_max: f64,
    pub eps_p: f64,
    pub eps_r: f64,
    pub eps_j: f64,
    /// Ticks allowed per goal before the next action is taken.
    pub h: u32,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            rate: 20.0,
            v_max: 0.5,
            omega_max: 2.0,
            dq_max: 4.0,
            eps_p: 0.005,
            eps_r: 0.05,
            eps_j: 0.05,
            h: 10,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<(), ControlError> {
        let named = [
            ("rate", self.rate),
            ("v_max", self.v_max),
            ("omega_max", self.omega_max),
            ("dq_max", self.dq_max),
            ("eps_p", self.eps_p),
            ("eps_r", self.eps_r),
            ("eps_j", self.eps_j),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(ControlError::InvalidParams(format!("{name} = {v}")));
            }
        }
        if self.h == 0 {
            return Err(ControlError::InvalidParams("h must be at least 1".into()));
        }
        Ok(())
    }

    /// Largest wrist translation per tick, meters.
    pub fn step_p(&self) -> f64 {
        self.v_max / self.rate
    }

    /// Largest wrist rotation per tick, radians.
    pub fn step_r(&self) -> f64 {
        self.omega_max / self.rate
    }

    /// Largest joint change per tick, radians.
    pub fn step_j(&self) -> f64 {
        self.dq_max / self.rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub state: BimanualState,
    pub tick: u64,
}

fn toward_arm(cur: &RobotArmState, goal: &RobotArmState, p: &ControllerParams) -> RobotArmState {
    let (dt, dr) = pose_distance(&cur.wrist, &goal.wrist);
    let translation = if dt <= p.step_p() + ARRIVAL_SLACK {
        *goal.wrist.translation()
    } else {
        cur.wrist.translation() + (goal.wrist.translation() - cur.wrist.translation()) * (p.step_p() / dt)
    };
    let rotation = if dr <= p.step_r() + ARRIVAL_SLACK {
        *goal.wrist.rotation()
    } else {
        let rel = cur.wrist.rotation().inverse() * goal.wrist.rotation();
        cur.wrist.rotation() * rel.powf(p.step_r() / dr)
    };
    let joints: [f64; HAND_JOINTS] = std::array::from_fn(|i| {
        let d = goal.joints[i] - cur.joints[i];
        if d.abs() <= p.step_j() + ARRIVAL_SLACK {
            goal.joints[i]
        } else {
            cur.joints[i] + p.step_j() * d.signum()
        }
    });
    RobotArmState::new(Pose::new(rotation, translation), joints)
}

/// One control tick of bounded-rate interpolation toward `goal`.
pub fn step_toward(current: &PlantState, goal: &BimanualState, params: &ControllerParams) -> PlantState {
    PlantState {
        state: BimanualState::new(
            toward_arm(&current.state.left, &goal.left, params),
            toward_arm(&current.state.right, &goal.right, params),
        ),
        tick: current.tick + 1,
    }
}

fn arm_reached(cur: &RobotArmState, goal: &RobotArmState, p: &ControllerParams) -> bool {
    let (dt, dr) = pose_distance(&cur.wrist, &goal.wrist);
    let dj = cur
        .joints
        .iter()
        .zip(&goal.joints)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    dt <= p.eps_p && dr <= p.eps_r && dj <= p.eps_j
}

pub fn reached(current: &BimanualState, goal: &BimanualState, params: &ControllerParams) -> bool {
    arm_reached(&current.left, &goal.left, params) && arm_reached(&current.right, &goal.right, params)
}

/// Produces the policy observation for a plant state.
pub trait Observer: Send {
    fn observe(&self, state: &BimanualState) -> ObsTensor;
}

/// A fixed scene cloud with the robot hands rendered on top.
#[derive(Debug, Clone)]
pub struct SceneObserver {
    pub scene: PointCloud,
    pub model: Arc<HandModel>,
    pub geometry: LinkGeometry,
}

impl SceneObserver {
    pub fn k(&self) -> usize {
        self.scene.len() + 2 * self.geometry.budget()
    }
}

impl Observer for SceneObserver {
    fn observe(&self, state: &BimanualState) -> ObsTensor {
        let merged = merge_robot_points(&self.scene, &[state.left, state.right], &self.model, &self.geometry);
        ObsTensor::from_cloud(&merged)
    }
}

/// One line of the rollout log. Actions are the commands sent to the
/// controller, not the poses the plant achieved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tick: u64,
    pub state: BimanualState,
    pub raw_action: BimanualState,
    pub corrected_action: BimanualState,
    pub mode: Option<CorrectionMode>,
    /// The policy was queried on this tick.
    pub query_flag: bool,
    /// A new goal was taken from the chunk on this tick.
    pub new_goal: bool,
}

pub fn write_log(log: &[LogEntry], path: &Path) -> Result<(), ControlError> {
    let io = |source| ControlError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for e in log {
        serde_json::to_writer(&mut f, e).expect("log entry serializes");
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, ControlError> {
    let text = std::fs::read_to_string(path).map_err(|source| ControlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| ControlError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

/// A rollout advanced one tick at a time. Per tick: apply pending
/// corrections, take a new goal if there is none, it was reached or `h`
/// ticks have passed (querying the policy when the chunk is used up),
/// correct it, log, then move the plant.
pub struct Rollout {
    policy: Arc<dyn Policy>,
    observer: Box<dyn Observer>,
    params: ControllerParams,
    plant: PlantState,
    chunk: VecDeque<BimanualState>,
    goal: Option<BimanualState>,
    since_goal: u32,
    hitl: Option<HitlMachine>,
    source: Option<Box<dyn CorrectionSource>>,
    recorded: Option<Vec<Step>>,
    log: Vec<LogEntry>,
}

impl Rollout {
    pub fn new(
        policy: Arc<dyn Policy>,
        observer: Box<dyn Observer>,
        initial: BimanualState,
        params: ControllerParams,
    ) -> Result<Self, ControlError> {
        params.validate()?;
        if !initial.is_finite() {
            return Err(ControlError::InvalidParams("non-finite initial state".into()));
        }
        Ok(Self {
            policy,
            observer,
            params,
            plant: PlantState {
                state: initial,
                tick: 0,
            },
            chunk: VecDeque::new(),
            goal: None,
            since_goal: 0,
            hitl: None,
            source: None,
            recorded: None,
            log: Vec::new(),
        })
    }

    /// Attaches a correction state machine and its input source.
    pub fn with_corrections(mut self, machine: HitlMachine, source: Box<dyn CorrectionSource>) -> Self {
        self.hitl = Some(machine);
        self.source = Some(source);
        self
    }

    /// Records `(obs, state, corrected action, mode)` every tick for `D'`.
    pub fn recording(mut self) -> Self {
        self.recorded = Some(Vec::new());
        self
    }

    pub fn plant(&self) -> &PlantState {
        &self.plant
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn mode(&self) -> Option<CorrectionMode> {
        self.hitl.as_ref().map(|m| m.mode())
    }

    pub fn observe(&self) -> ObsTensor {
        self.observer.observe(&self.plant.state)
    }

    pub fn tick(&mut self) -> Result<LogEntry, ControlError> {
        let tick = self.plant.tick;
        let state = self.plant.state;

        if let (Some(source), Some(machine)) = (self.source.as_mut(), self.hitl.as_mut()) {
            for event in source.poll(tick)? {
                let before = machine.mode();
                machine.apply(event, &state);
                if before == CorrectionMode::Teleop && machine.mode() == CorrectionMode::Residual {
                    self.chunk.clear();
                    self.goal = None;
                }
            }
        }
        let mode = self.mode();

        let mut obs = None;
        let mut query_flag = false;
        let mut new_goal = false;
        if mode != Some(CorrectionMode::Teleop) {
            let need = match &self.goal {
                None => true,
                Some(g) => reached(&state, g, &self.params) || self.since_goal >= self.params.h,
            };
            if need {
                if self.chunk.is_empty() {
                    let cloud = self.observer.observe(&state);
                    let chunk = self.policy.act(&Observation {
                        cloud: cloud.clone(),
                        state,
                    })?;
                    obs = Some(cloud);
                    if chunk.actions.is_empty() {
                        return Err(ControlError::EmptyChunk);
                    }
                    self.chunk.extend(chunk.actions);
                    query_flag = true;
                }
                self.goal = self.chunk.pop_front();
                self.since_goal = 0;
                new_goal = true;
            }
        }

        let raw = self.goal.unwrap_or(state);
        if !raw.is_finite() {
            return Err(ControlError::NonFiniteGoal(tick));
        }
        let corrected = match self.hitl.as_mut() {
            Some(m) => m.correct(&raw),
            None => raw,
        };

        let entry = LogEntry {
            tick,
            state,
            raw_action: raw,
            corrected_action: corrected,
            mode,
            query_flag,
            new_goal,
        };
        if let Some(rec) = self.recorded.as_mut() {
            rec.push(Step {
                obs: obs.unwrap_or_else(|| self.observer.observe(&state)),
                state,
                action: corrected,
                mode: Some(mode.unwrap_or(CorrectionMode::Residual)),
            });
        }
        self.log.push(entry);
        self.plant = step_toward(&self.plant, &corrected, &self.params);
        self.since_goal += 1;
        Ok(entry)
    }

    pub fn run(&mut self, ticks: u64) -> Result<(), ControlError> {
        for _ in 0..ticks {
            self.tick()?;
        }
        Ok(())
    }

    /// Closes the recorded `D'` demo, if recording was enabled and any tick
    /// ran.
    pub fn take_recording(&mut self, meta: DemoMeta) -> Option<Demo> {
        let steps = self.recorded.replace(Vec::new())?;
        if steps.is_empty() {
            return None;
        }
        Some(Demo { steps, meta })
    }

    pub fn into_log(self) -> Vec<LogEntry> {
        self.log
    }
}

/// Runs a rollout for `ticks` ticks without corrections.
pub fn rollout(
    policy: Arc<dyn Policy>,
    observer: Box<dyn Observer>,
    initial: BimanualState,
    ticks: u64,
    params: ControllerParams,
) -> Result<Vec<LogEntry>, ControlError> {
    let mut r = Rollout::new(policy, observer, initial, params)?;
    r.run(ticks)?;
    Ok(r.into_log())
}
