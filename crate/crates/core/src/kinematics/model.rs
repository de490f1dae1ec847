use std::path::Path;

use nalgebra::{Unit, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::KinematicsError;
use crate::geometry::{Pose, Vec3};

pub const FINGERS: usize = 4;
pub const JOINTS_PER_FINGER: usize = 4;
pub const HAND_JOINTS: usize = FINGERS * JOINTS_PER_FINGER;

pub const FINGER_NAMES: [&str; FINGERS] = ["thumb", "index", "middle", "ring"];

/// Revolute joint. `origin` places the joint frame in its parent frame at
/// zero angle; the joint then rotates about `axis` in its own frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub axis: [f64; 3],
    pub origin: Pose,
    pub limits: [f64; 2],
}

impl Joint {
    pub fn axis(&self) -> Vec3 {
        Vec3::new(self.axis[0], self.axis[1], self.axis[2])
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.limits[0], self.limits[1])
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.limits[0] + self.limits[1])
    }

    /// `origin` followed by the rotation for angle `q`.
    pub fn transform(&self, q: f64) -> Pose {
        let axis = Unit::new_unchecked(self.axis());
        self.origin
            .compose(&Pose::from_rotation(UnitQuaternion::from_axis_angle(&axis, q)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub name: String,
    pub joints: Vec<Joint>,
    pub tip_offset: Pose,
}

impl Chain {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        let bad = |reason: String| Err(KinematicsError::InvalidModel(reason));
        if self.joints.len() != JOINTS_PER_FINGER {
            return bad(format!(
                "chain {} has {} joints, expected {}",
                self.name,
                self.joints.len(),
                JOINTS_PER_FINGER
            ));
        }
        for (j, joint) in self.joints.iter().enumerate() {
            let n = joint.axis().norm();
            if (n - 1.0).abs() > 1e-9 {
                return bad(format!("chain {} joint {} axis norm {}", self.name, j, n));
            }
            let [lo, hi] = joint.limits;
            if !(lo < hi) {
                return bad(format!("chain {} joint {} limits [{lo}, {hi}]", self.name, j));
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &[f64; JOINTS_PER_FINGER]) -> [f64; JOINTS_PER_FINGER] {
        std::array::from_fn(|j| self.joints[j].clamp(q[j]))
    }

    pub fn mid(&self) -> [f64; JOINTS_PER_FINGER] {
        std::array::from_fn(|j| self.joints[j].mid())
    }
}

/// Four independent finger chains rooted at the wrist frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandModel {
    pub name: String,
    pub chains: Vec<Chain>,
    /// Fingertip positions at all-zero joint angles, wrist frame.
    pub home_tips: [[f64; 3]; FINGERS],
}

const BUILTIN: &str = include_str!("../../data/hand_model.json");

impl HandModel {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.chains.len() != FINGERS {
            return Err(KinematicsError::InvalidModel(format!(
                "expected {} chains, found {}",
                FINGERS,
                self.chains.len()
            )));
        }
        for (chain, name) in self.chains.iter().zip(FINGER_NAMES) {
            if chain.name != name {
                return Err(KinematicsError::InvalidModel(format!(
                    "chain `{}` where `{}` was expected",
                    chain.name, name
                )));
            }
            chain.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let model: HandModel = serde_json::from_str(text)
            .map_err(|e| KinematicsError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KinematicsError::InvalidModel(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The shipped four-finger, sixteen-joint model.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("shipped hand model is valid")
    }

    pub fn joint(&self, index: usize) -> &Joint {
        &self.chains[index / JOINTS_PER_FINGER].joints[index % JOINTS_PER_FINGER]
    }

    pub fn clamp(&self, q: &[f64; HAND_JOINTS]) -> [f64; HAND_JOINTS] {
        std::array::from_fn(|i| self.joint(i).clamp(q[i]))
    }

    pub fn within_limits(&self, q: &[f64; HAND_JOINTS]) -> bool {
        q.iter().enumerate().all(|(i, v)| {
            let [lo, hi] = self.joint(i).limits;
            (lo..=hi).contains(v)
        })
    }

    pub fn mid_range(&self) -> [f64; HAND_JOINTS] {
        std::array::from_fn(|i| self.joint(i).mid())
    }

    pub fn home_tips(&self) -> [Vec3; FINGERS] {
        self.home_tips.map(|t| Vec3::new(t[0], t[1], t[2]))
    }

    pub fn finger(q: &[f64; HAND_JOINTS], finger: usize) -> [f64; JOINTS_PER_FINGER] {
        std::array::from_fn(|j| q[finger * JOINTS_PER_FINGER + j])
    }

    pub fn set_finger(q: &mut [f64; HAND_JOINTS], finger: usize, values: &[f64; JOINTS_PER_FINGER]) {
        q[finger * JOINTS_PER_FINGER..(finger + 1) * JOINTS_PER_FINGER].copy_from_slice(values);
    }
}
