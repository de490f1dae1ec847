use super::model::{Chain, HandModel, FINGERS, HAND_JOINTS, JOINTS_PER_FINGER};
use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    /// Fingertip positions in the wrist frame, `[thumb, index, middle, ring]`.
    pub tips: [Vec3; FINGERS],
    /// Pose of every joint frame (after its rotation) in the wrist frame.
    pub joint_poses: [[Pose; JOINTS_PER_FINGER]; FINGERS],
    /// Set when an input angle was outside its limits and got clamped.
    pub clamped: bool,
}

/// Joint frames of one chain plus its tip position.
pub fn chain_fk(chain: &Chain, q: &[f64; JOINTS_PER_FINGER]) -> ([Pose; JOINTS_PER_FINGER], Vec3) {
    let mut frames = [Pose::identity(); JOINTS_PER_FINGER];
    let mut acc = Pose::identity();
    for (j, joint) in chain.joints.iter().enumerate() {
        acc = acc.compose(&joint.transform(q[j]));
        frames[j] = acc;
    }
    let tip = acc.compose(&chain.tip_offset);
    (frames, *tip.translation())
}

pub fn chain_tip(chain: &Chain, q: &[f64; JOINTS_PER_FINGER]) -> Vec3 {
    chain_fk(chain, q).1
}

pub fn fk(model: &HandModel, q: &[f64; HAND_JOINTS]) -> FkResult {
    let clamped_q = model.clamp(q);
    let clamped = clamped_q != *q;
    if clamped {
        log::warn!("fk: joint angles outside limits were clamped");
    }
    let mut tips = [Vec3::zeros(); FINGERS];
    let mut joint_poses = [[Pose::identity(); JOINTS_PER_FINGER]; FINGERS];
    for (f, chain) in model.chains.iter().enumerate() {
        let (frames, tip) = chain_fk(chain, &HandModel::finger(&clamped_q, f));
        tips[f] = tip;
        joint_poses[f] = frames;
    }
    FkResult {
        tips,
        joint_poses,
        clamped,
    }
}
