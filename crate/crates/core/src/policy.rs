//! The policy interface (observation in, `d`-step action chunk out) and a
//! nearest-neighbour replay baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::geometry::pose_distance;
use crate::kinematics::{BimanualState, HandModel, RobotArmState};
use crate::perception::ObsTensor;

/// Default action chunk length.
pub const DEFAULT_HORIZON: usize = 8;
/// Largest chunk length a policy may be configured with.
pub const MAX_HORIZON: usize = 64;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("replay policy needs a non-empty dataset")]
    EmptyDataset,
    #[error("horizon {0} outside 1..={MAX_HORIZON}")]
    InvalidHorizon(usize),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("invalid policy weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub cloud: ObsTensor,
    pub state: BimanualState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub actions: Vec<BimanualState>,
}

impl ActionChunk {
    pub fn d(&self) -> usize {
        self.actions.len()
    }
}

pub trait Policy: Send + Sync {
    /// Chunk length `d` returned by every call to [`Policy::act`].
    fn horizon(&self) -> usize;

    fn act(&self, obs: &Observation) -> Result<ActionChunk, PolicyError>;
}

/// Checks the post-conditions every policy must satisfy.
pub fn check_chunk(chunk: &ActionChunk, horizon: usize, model: &HandModel) -> Result<(), String> {
    if chunk.d() != horizon {
        return Err(format!("chunk has {} actions, expected {horizon}", chunk.d()));
    }
    for (i, a) in chunk.actions.iter().enumerate() {
        if !a.is_finite() {
            return Err(format!("action {i} is not finite"));
        }
        if !a.within_limits(model) {
            return Err(format!("action {i} violates joint limits"));
        }
    }
    Ok(())
}

fn check_horizon(d: usize) -> Result<(), PolicyError> {
    if d == 0 || d > MAX_HORIZON {
        return Err(PolicyError::InvalidHorizon(d));
    }
    Ok(())
}

/// Returns the same action `d` times.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy {
    action: BimanualState,
    horizon: usize,
}

impl ConstantPolicy {
    pub fn new(action: BimanualState, horizon: usize) -> Result<Self, PolicyError> {
        check_horizon(horizon)?;
        Ok(Self { action, horizon })
    }
}

impl Policy for ConstantPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn act(&self, _obs: &Observation) -> Result<ActionChunk, PolicyError> {
        Ok(ActionChunk {
            actions: vec![self.action; self.horizon],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub w_p: f64,
    pub w_r: f64,
    pub w_j: f64,
    pub horizon: usize,
    /// Weight of the symmetric chamfer distance between observation clouds.
    /// `None` disables the term.
    #[serde(default)]
    pub w_cloud: Option<f64>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            w_p: 1.0,
            w_r: 0.3,
            w_j: 0.1,
            horizon: DEFAULT_HORIZON,
            w_cloud: None,
        }
    }
}

fn arm_distance(a: &RobotArmState, b: &RobotArmState, c: &ReplayConfig) -> f64 {
    let (dt, dr) = pose_distance(&a.wrist, &b.wrist);
    let dj = a
        .joints
        .iter()
        .zip(&b.joints)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    c.w_p * dt + c.w_r * dr + c.w_j * dj
}

/// Weighted proprioceptive distance summed over both arms.
pub fn state_distance(a: &BimanualState, b: &BimanualState, config: &ReplayConfig) -> f64 {
    arm_distance(&a.left, &b.left, config) + arm_distance(&a.right, &b.right, config)
}

/// Symmetric mean nearest-neighbour distance between the xyz columns.
pub fn chamfer(a: &ObsTensor, b: &ObsTensor) -> f64 {
    fn one_way(a: &ObsTensor, b: &ObsTensor) -> f64 {
        if a.k() == 0 || b.k() == 0 {
            return 0.0;
        }
        let total: f64 = a
            .rows()
            .map(|p| {
                b.rows()
                    .map(|q| {
                        (0..3)
                            .map(|i| {
                                let d = p[i] as f64 - q[i] as f64;
                                d * d
                            })
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum();
        total / a.k() as f64
    }
    one_way(a, b) + one_way(b, a)
}

/// Finds the stored step whose state is closest to the query and replays
/// the actions that followed it.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    dataset: Dataset,
    config: ReplayConfig,
}

impl ReplayPolicy {
    pub fn new(dataset: Dataset, config: ReplayConfig) -> Result<Self, PolicyError> {
        check_horizon(config.horizon)?;
        let weights = [config.w_p, config.w_r, config.w_j, config.w_cloud.unwrap_or(0.0)];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(PolicyError::InvalidWeights(format!("{weights:?}")));
        }
        if dataset.step_count() == 0 {
            return Err(PolicyError::EmptyDataset);
        }
        Ok(Self { dataset, config })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Index `(demo, step)` of the nearest stored step. Ties go to the
    /// lowest demo index, then the lowest step index.
    pub fn nearest(&self, obs: &Observation) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_d = f64::INFINITY;
        for (di, demo) in self.dataset.demos().iter().enumerate() {
            for (si, step) in demo.steps.iter().enumerate() {
                let mut d = state_distance(&obs.state, &step.state, &self.config);
                if let Some(w) = self.config.w_cloud {
                    d += w * chamfer(&obs.cloud, &step.obs);
                }
                if d < best_d {
                    best_d = d;
                    best = (di, si);
                }
            }
        }
        best
    }

    /// The `d` stored actions starting at `(demo, step)`, padded with the
    /// demo's final action.
    pub fn chunk_at(&self, demo: usize, step: usize) -> ActionChunk {
        let steps = &self.dataset.demos()[demo].steps;
        let last = steps.len() - 1;
        ActionChunk {
            actions: (0..self.config.horizon)
                .map(|i| steps[(step + i).min(last)].action)
                .collect(),
        }
    }
}

impl Policy for ReplayPolicy {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn act(&self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        if !obs.state.is_finite() {
            return Err(PolicyError::InvalidObservation("non-finite state".into()));
        }
        if self.config.w_cloud.is_some() && obs.cloud.k() != self.dataset.k() {
            return Err(PolicyError::InvalidObservation(format!(
                "cloud has {} rows, dataset has {}",
                obs.cloud.k(),
                self.dataset.k()
            )));
        }
        let (d, s) = self.nearest(obs);
        Ok(self.chunk_at(d, s))
    }
}
