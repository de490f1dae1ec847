//! Robot hand model, forward kinematics, fingertip IK and human-to-robot
//! retargeting.

mod fk;
mod ik;
mod model;
mod retarget;

pub use fk::{chain_fk, chain_tip, fk, FkResult};
pub use ik::{
    ik_fingertips, numeric_jacobian, solve_finger, FingerSolution, IkParams, IkSolution,
    JACOBIAN_STEP,
};
pub use model::{
    Chain, HandModel, Joint, FINGERS, FINGER_NAMES, HAND_JOINTS, JOINTS_PER_FINGER,
};
pub use retarget::{retarget_frame, wrist_frame_targets, RetargetOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Side;
use crate::geometry::{GeometryError, Pose};

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("invalid hand model: {0}")]
    InvalidModel(String),
    #[error("need at least two states to build actions, got {0}")]
    TooFewStates(usize),
    #[error("malformed state vector: {0}")]
    MalformedState(String),
}

/// Proprioception of one arm: wrist pose plus the sixteen hand joint angles,
/// ordered thumb, index, middle, ring (four joints each).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotArmState {
    pub wrist: Pose,
    pub joints: [f64; HAND_JOINTS],
}

/// Number of scalars in a flattened arm state: pose7 followed by 16 joints.
pub const ARM_STATE_LEN: usize = 7 + HAND_JOINTS;
/// Number of scalars in a flattened bimanual state (left arm, then right).
pub const BIMANUAL_STATE_LEN: usize = 2 * ARM_STATE_LEN;

impl RobotArmState {
    pub fn new(wrist: Pose, joints: [f64; HAND_JOINTS]) -> Self {
        Self { wrist, joints }
    }

    pub fn write_flat(&self, out: &mut [f64]) {
        out[..7].copy_from_slice(&self.wrist.to_pose7());
        out[7..ARM_STATE_LEN].copy_from_slice(&self.joints);
    }

    pub fn from_flat(v: &[f64]) -> Result<Self, KinematicsError> {
        if v.len() != ARM_STATE_LEN {
            return Err(KinematicsError::MalformedState(format!(
                "expected {ARM_STATE_LEN} values, got {}",
                v.len()
            )));
        }
        let pose7: [f64; 7] = v[..7].try_into().unwrap();
        let wrist = Pose::from_pose7(pose7)
            .map_err(|e: GeometryError| KinematicsError::MalformedState(e.to_string()))?;
        let joints: [f64; HAND_JOINTS] = v[7..].try_into().unwrap();
        if !joints.iter().all(|j| j.is_finite()) {
            return Err(KinematicsError::MalformedState("non-finite joint".into()));
        }
        Ok(Self { wrist, joints })
    }

    pub fn is_finite(&self) -> bool {
        self.wrist.is_finite() && self.joints.iter().all(|j| j.is_finite())
    }
}

/// Left and right arm proprioception; the policy's state and action type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BimanualState {
    pub left: RobotArmState,
    pub right: RobotArmState,
}

impl BimanualState {
    pub fn new(left: RobotArmState, right: RobotArmState) -> Self {
        Self { left, right }
    }

    pub fn arm(&self, side: Side) -> &RobotArmState {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn arm_mut(&mut self, side: Side) -> &mut RobotArmState {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }

    pub fn arms(&self) -> [&RobotArmState; 2] {
        [&self.left, &self.right]
    }

    pub fn to_flat(&self) -> [f64; BIMANUAL_STATE_LEN] {
        let mut out = [0.0; BIMANUAL_STATE_LEN];
        self.left.write_flat(&mut out[..ARM_STATE_LEN]);
        self.right.write_flat(&mut out[ARM_STATE_LEN..]);
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self, KinematicsError> {
        if v.len() != BIMANUAL_STATE_LEN {
            return Err(KinematicsError::MalformedState(format!(
                "expected {BIMANUAL_STATE_LEN} values, got {}",
                v.len()
            )));
        }
        Ok(Self {
            left: RobotArmState::from_flat(&v[..ARM_STATE_LEN])?,
            right: RobotArmState::from_flat(&v[ARM_STATE_LEN..])?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.left.is_finite() && self.right.is_finite()
    }

    pub fn within_limits(&self, model: &HandModel) -> bool {
        model.within_limits(&self.left.joints) && model.within_limits(&self.right.joints)
    }
}

/// Action labels are next states: `a_t = s_{t+1}`, one fewer than the states.
pub fn build_action_labels(states: &[BimanualState]) -> Result<Vec<BimanualState>, KinematicsError> {
    if states.len() < 2 {
        return Err(KinematicsError::TooFewStates(states.len()));
    }
    Ok(states[1..].to_vec())
}
