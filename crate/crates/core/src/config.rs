//! Operator configuration shared by the command line and the service, and
//! the glue that turns a dataset into a ready-to-run rollout.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, ControllerParams, Rollout, SceneObserver};
use crate::dataset::{Dataset, DatasetError, DemoMeta};
use crate::geometry::FrameTag;
use crate::hitl::{CorrectionSource, HitlError, HitlMachine, HitlParams};
use crate::kinematics::{BimanualState, HandModel, KinematicsError};
use crate::perception::LinkGeometry;
use crate::pipeline::PipelineParams;
use crate::policy::{ConstantPolicy, Policy, PolicyError, ReplayConfig, ReplayPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Hitl(#[from] HitlError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub session: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    pub hand_model: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub pipeline: PipelineParams,
    pub controller: ControllerParams,
    pub hitl: HitlParams,
    pub replay: ReplayConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            session: None,
            rig: None,
            hand_model: None,
            output: None,
            pipeline: PipelineParams::default(),
            controller: ControllerParams::default(),
            hitl: HitlParams::default(),
            replay: ReplayConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::BadFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| ConfigError::BadFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.controller.validate()?;
        self.hitl.gains.validate()?;
        for (what, p) in [("session", &self.session), ("rig", &self.rig), ("hand_model", &self.hand_model)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::Invalid(format!("{what} {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn hand_model(&self) -> Result<HandModel, ConfigError> {
        match &self.hand_model {
            Some(p) => Ok(HandModel::load(p)?),
            None => Ok(HandModel::builtin()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Replay,
    /// Holds the initial state.
    Constant,
}

impl std::str::FromStr for PolicyKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replay" => Ok(PolicyKind::Replay),
            "constant" => Ok(PolicyKind::Constant),
            other => Err(ConfigError::Invalid(format!("unknown policy '{other}'"))),
        }
    }
}

/// Everything needed to start a rollout from a dataset.
#[derive(Clone)]
pub struct RolloutSetup {
    pub policy: Arc<dyn Policy>,
    pub observer: SceneObserver,
    pub initial: BimanualState,
    pub params: ControllerParams,
    pub model: Arc<HandModel>,
    pub hitl: HitlParams,
}

impl RolloutSetup {
    /// Builds the policy, the initial plant state (the first state of demo
    /// `init_demo`) and a static scene taken from that step's observation:
    /// its first `k_scene` rows.
    pub fn from_dataset(
        dataset: Dataset,
        kind: PolicyKind,
        init_demo: usize,
        config: &PipelineConfig,
        model: Arc<HandModel>,
    ) -> Result<Self, ConfigError> {
        let Some(demo) = dataset.demos().get(init_demo) else {
            return Err(ConfigError::Invalid(format!(
                "dataset has {} demos, cannot start from demo {init_demo}",
                dataset.demos().len()
            )));
        };
        let first = &demo.steps[0];
        let k_hand = config.pipeline.k_hand.min(dataset.k());
        let k_scene = dataset.k() - k_hand;
        let observer = SceneObserver {
            scene: first.obs.to_cloud(k_scene, FrameTag::RobotSpace),
            model: model.clone(),
            geometry: LinkGeometry::for_model(&model, k_hand / 2),
        };
        let initial = first.state;
        let policy: Arc<dyn Policy> = match kind {
            PolicyKind::Replay => Arc::new(ReplayPolicy::new(dataset, config.replay)?),
            PolicyKind::Constant => Arc::new(ConstantPolicy::new(initial, config.replay.horizon)?),
        };
        Ok(Self {
            policy,
            observer,
            initial,
            params: config.controller,
            model,
            hitl: config.hitl,
        })
    }

    pub fn rollout(&self) -> Result<Rollout, ConfigError> {
        Ok(Rollout::new(
            self.policy.clone(),
            Box::new(self.observer.clone()),
            self.initial,
            self.params,
        )?)
    }

    /// A recording rollout with corrections from `source`.
    pub fn corrected_rollout(&self, source: Box<dyn CorrectionSource>) -> Result<Rollout, ConfigError> {
        let machine = HitlMachine::new(self.hitl, self.model.clone())?;
        Ok(self.rollout()?.with_corrections(machine, source).recording())
    }
}

/// Metadata attached to the correction demo recorded by a rollout.
pub fn correction_meta(init_demo: usize) -> DemoMeta {
    DemoMeta::new("rollout", format!("correction from demo {init_demo}"))
}
