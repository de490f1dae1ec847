use super::ik::{ik_fingertips, IkParams};
use super::model::{HandModel, FINGERS, HAND_JOINTS};
use super::RobotArmState;
use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct RetargetOutput {
    pub state: RobotArmState,
    pub residuals: [f64; FINGERS],
    pub iterations: usize,
}

impl RetargetOutput {
    pub fn mean_residual(&self) -> f64 {
        self.residuals.iter().sum::<f64>() / FINGERS as f64
    }
}

/// Maps world-frame human fingertips into IK targets in the wrist frame. The
/// little finger (last entry) is dropped and targets are scaled about the
/// wrist origin by `gamma`.
pub fn wrist_frame_targets(tips_world: &[Vec3; 5], wrist: &Pose, gamma: f64) -> [Vec3; FINGERS] {
    let inv = wrist.inverse();
    std::array::from_fn(|i| inv.transform_point(&tips_world[i]) * gamma)
}

/// One retargeting step. The robot wrist takes the human wrist pose verbatim;
/// the fingers are solved by IK warm-started from the previous frame.
pub fn retarget_frame(
    tips_world: &[Vec3; 5],
    wrist_world: &Pose,
    model: &HandModel,
    prev_joints: &[f64; HAND_JOINTS],
    params: &IkParams,
    gamma: f64,
) -> RetargetOutput {
    let targets = wrist_frame_targets(tips_world, wrist_world, gamma);
    let sol = ik_fingertips(model, &targets, prev_joints, params);
    RetargetOutput {
        state: RobotArmState::new(*wrist_world, sol.joints),
        residuals: sol.residuals,
        iterations: sol.iterations,
    }
}
