//! Synthetic capture sessions with known ground truth: a scripted chest
//! tracker, scripted robot wrist and joint trajectories whose fingertips come
//! from forward kinematics, and a ray-cast tabletop scene.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{RigExtrinsics, Side, TrackerId};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::ingest::{
    frame_file, save_annotations, save_session, DemoAnnotation, DepthImage, IngestError, MocapFrame,
    RgbImage, SessionMeta,
};
use crate::kinematics::{fk, HandModel, RobotArmState, HAND_JOINTS};

/// Axis-aligned colored box resting in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub rgb: [u8; 3],
}

/// A finite horizontal table and boxes on it, in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub table_z: f64,
    pub table_min: [f64; 2],
    pub table_max: [f64; 2],
    pub table_rgb: [u8; 3],
    pub boxes: Vec<SceneBox>,
}

impl Default for SynthScene {
    fn default() -> Self {
        Self {
            table_z: -0.45,
            table_min: [0.1, -0.6],
            table_max: [1.4, 0.6],
            table_rgb: [150, 110, 70],
            boxes: vec![
                SceneBox {
                    min: [0.55, -0.06, -0.45],
                    max: [0.65, 0.04, -0.37],
                    rgb: [200, 30, 30],
                },
                SceneBox {
                    min: [0.7, 0.15, -0.45],
                    max: [0.76, 0.21, -0.33],
                    rgb: [30, 180, 40],
                },
            ],
        }
    }
}

impl SynthScene {
    /// Nearest hit along `origin + t * dir` for `t > 0`.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, [u8; 3])> {
        let mut best: Option<(f64, [u8; 3])> = None;
        let mut consider = |t: f64, rgb: [u8; 3]| {
            if t > 1e-9 && best.map_or(true, |(b, _)| t < b) {
                best = Some((t, rgb));
            }
        };
        if dir.z.abs() > 1e-12 {
            let t = (self.table_z - origin.z) / dir.z;
            let p = origin + dir * t;
            if p.x >= self.table_min[0] && p.x <= self.table_max[0] && p.y >= self.table_min[1] && p.y <= self.table_max[1] {
                consider(t, self.table_rgb);
            }
        }
        for b in &self.boxes {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut hit = true;
            for i in 0..3 {
                if dir[i].abs() < 1e-15 {
                    if origin[i] < b.min[i] || origin[i] > b.max[i] {
                        hit = false;
                    }
                    continue;
                }
                let a = (b.min[i] - origin[i]) / dir[i];
                let c = (b.max[i] - origin[i]) / dir[i];
                t0 = t0.max(a.min(c));
                t1 = t1.min(a.max(c));
            }
            if hit && t0 <= t1 {
                consider(t0, b.rgb);
            }
        }
        best
    }

    /// Depth and color images seen from a camera at `camera_world` (optical
    /// frame: z forward, x right, y down).
    pub fn render(&self, camera_world: &Pose, intr: &Intrinsics) -> (DepthImage, RgbImage) {
        let mut depth = DepthImage::new(intr.width, intr.height);
        let mut rgb = RgbImage::new(intr.width, intr.height);
        let origin = *camera_world.translation();
        for v in 0..intr.height {
            for u in 0..intr.width {
                let d_cam = Vec3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
                let dir = camera_world.rotation() * d_cam;
                if let Some((t, color)) = self.raycast(&origin, &dir) {
                    let raw = (t / intr.depth_scale).round();
                    if raw >= 1.0 && raw <= u16::MAX as f64 {
                        depth.set(u, v, raw as u16);
                        rgb.set(u, v, color);
                    }
                }
            }
        }
        (depth, rgb)
    }
}

/// Parameters of a generated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub capture_hz: u32,
    pub frames: usize,
    pub intrinsics: Intrinsics,
    pub demos: Vec<DemoAnnotation>,
    /// Amplitude scale of the chest tracker sway; 0 keeps the chest still.
    pub chest_sway: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            capture_hz: 60,
            frames: 240,
            intrinsics: Intrinsics {
                fx: 40.0,
                fy: 40.0,
                cx: 31.5,
                cy: 23.5,
                width: 64,
                height: 48,
                depth_scale: 0.001,
            },
            demos: vec![
                DemoAnnotation {
                    start_frame: 12,
                    end_frame: 113,
                    label: "reach".into(),
                },
                DemoAnnotation {
                    start_frame: 126,
                    end_frame: 233,
                    label: "lift".into(),
                },
            ],
            chest_sway: 1.0,
        }
    }
}

/// Ground truth behind one generated frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTruthFrame {
    pub t: f64,
    pub main_world: Pose,
    /// Hub (wrist) poses, left then right.
    pub wrists: [Pose; 2],
    pub joints: [[f64; HAND_JOINTS]; 2],
    /// World-frame fingertips, `[thumb, index, middle, ring, little]`.
    pub tips_world: [[Vec3; 5]; 2],
}

impl SynthTruthFrame {
    pub fn arm(&self, side: Side) -> RobotArmState {
        let i = side as usize;
        RobotArmState::new(self.wrists[i], self.joints[i])
    }
}

/// Little-finger tip in the hub frame; the robot hand has no matching digit.
pub const LITTLE_TIP_HUB: [f64; 3] = [0.165, -0.075, -0.005];

/// Chest tracker pose at time `t`; exactly the identity at `t = 0`.
pub fn chest_pose(t: f64, sway: f64) -> Pose {
    let w = 1.3;
    Pose::new(
        nalgebra::UnitQuaternion::from_axis_angle(&Vec3::z_axis(), sway * 0.05 * (w * t).sin()),
        Vec3::new(
            sway * 0.02 * (w * t).sin(),
            sway * 0.015 * (1.0 - (w * t).cos()),
            sway * 0.01 * (2.0 * w * t).sin(),
        ),
    )
}

/// Scripted wrist pose. x increases monotonically with `t`.
pub fn wrist_pose(t: f64, side: Side) -> Pose {
    let s = match side {
        Side::Left => 1.0,
        Side::Right => -1.0,
    };
    let axis = nalgebra::Unit::new_normalize(Vec3::new(0.3, 0.5 * s, 1.0));
    let rot = nalgebra::UnitQuaternion::from_axis_angle(&axis, 0.25 * (0.7 * t + 0.4 * s).sin());
    Pose::new(
        rot,
        Vec3::new(
            0.4 + 0.03 * t + 0.03 * (0.9 * t).sin(),
            s * (0.16 + 0.02 * (1.3 * t).sin()),
            -0.3 + 0.02 * (1.1 * t + s).sin(),
        ),
    )
}

/// Scripted hand joints, kept inside the model's limits.
pub fn joint_trajectory(t: f64, side: Side, model: &HandModel) -> [f64; HAND_JOINTS] {
    let phase = if side == Side::Left { 0.0 } else { 1.1 };
    std::array::from_fn(|i| {
        let j = model.joint(i);
        let (lo, hi) = (j.limits[0], j.limits[1]);
        let w = 0.6 + 0.07 * i as f64;
        lo + (hi - lo) * (0.45 + 0.3 * (w * t + 0.5 * i as f64 + phase).sin())
    })
}

pub fn truth_at(t: f64, spec: &SynthSpec, model: &HandModel) -> SynthTruthFrame {
    let little = Vec3::from(LITTLE_TIP_HUB);
    let mut wrists = [Pose::identity(); 2];
    let mut joints = [[0.0; HAND_JOINTS]; 2];
    let mut tips_world = [[Vec3::zeros(); 5]; 2];
    for side in Side::BOTH {
        let i = side as usize;
        wrists[i] = wrist_pose(t, side);
        joints[i] = joint_trajectory(t, side, model);
        let tips = fk(model, &joints[i]).tips;
        for f in 0..4 {
            tips_world[i][f] = wrists[i].transform_point(&tips[f]);
        }
        tips_world[i][4] = wrists[i].transform_point(&little);
    }
    SynthTruthFrame {
        t,
        main_world: chest_pose(t, spec.chest_sway),
        wrists,
        joints,
        tips_world,
    }
}

/// Inverts the rig model: the tracker readings that produce `truth`.
pub fn capture_frame(truth: &SynthTruthFrame, rig: &RigExtrinsics, index: u32) -> MocapFrame {
    let reported = |id: TrackerId, world: &Pose| {
        rig.slot_to_main[&id].inverse().compose(world)
    };
    let side_reading = |side: Side| {
        let i = side as usize;
        let hub = truth.wrists[i];
        let cam = hub.compose(&rig.cam_to_hub(side).inverse());
        let inv = hub.inverse();
        (
            reported(side.tracker(), &cam),
            truth.tips_world[i].map(|p| inv.transform_point(&p)),
        )
    };
    let (left_reported, tips_left_hub) = side_reading(Side::Left);
    let (right_reported, tips_right_hub) = side_reading(Side::Right);
    MocapFrame {
        t: truth.t,
        main_reported: reported(TrackerId::Main, &truth.main_world),
        left_reported,
        right_reported,
        tips_left_hub,
        tips_right_hub,
        rgb_index: index,
        depth_index: index,
    }
}

/// Writes a complete session (meta, rig, frames, images, annotations) to
/// `dir` and returns the per-frame ground truth.
pub fn generate_session(
    dir: &Path,
    spec: &SynthSpec,
    rig: &RigExtrinsics,
    scene: &SynthScene,
    model: &HandModel,
) -> Result<Vec<SynthTruthFrame>, IngestError> {
    let truth: Vec<SynthTruthFrame> = (0..spec.frames)
        .map(|i| truth_at(i as f64 / spec.capture_hz as f64, spec, model))
        .collect();
    let frames: Vec<MocapFrame> = truth
        .iter()
        .enumerate()
        .map(|(i, tr)| capture_frame(tr, rig, i as u32))
        .collect();
    let meta = SessionMeta {
        capture_hz: spec.capture_hz,
        intrinsics: spec.intrinsics,
        frame_count: frames.len(),
        rig: "rig.json".into(),
    };
    save_session(dir, &meta, rig, &frames)?;
    save_annotations(dir, &spec.demos)?;
    use rayon::prelude::*;
    frames.par_iter().try_for_each(|f| {
        let cam = crate::calibration::chest_cloud_pose(rig, &f.main_reported);
        let (depth, rgb) = scene.render(&cam, &spec.intrinsics);
        depth.write(&frame_file(dir, "depth", f.depth_index))?;
        rgb.write(&frame_file(dir, "rgb", f.rgb_index))
    })?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chest_starts_at_identity() {
        assert_eq!(chest_pose(0.0, 1.0), Pose::identity());
    }

    #[test]
    fn joints_stay_in_limits() {
        let m = HandModel::builtin();
        for k in 0..200 {
            let q = joint_trajectory(k as f64 * 0.05, Side::Right, &m);
            assert!(m.within_limits(&q));
        }
    }

    #[test]
    fn raycast_hits_table_from_above() {
        let scene = SynthScene::default();
        let hit = scene.raycast(&Vec3::new(0.3, 0.3, 0.0), &Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert!((hit.0 - 0.45).abs() < 1e-12);
        let boxed = scene.raycast(&Vec3::new(0.6, 0.0, 0.0), &Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert!((boxed.0 - 0.37).abs() < 1e-12);
    }
}
