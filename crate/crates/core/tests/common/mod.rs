#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use dexpipe::calibration::{RigExtrinsics, Side};
use dexpipe::config::{PipelineConfig, PolicyKind, RolloutSetup};
use dexpipe::dataset::Dataset;
use dexpipe::geometry::{Pose, Vec3};
use dexpipe::hitl::{HumanHand, ScriptLine};
use dexpipe::ingest::{load_session, Session};
use dexpipe::kinematics::{fk, BimanualState, HandModel};
use dexpipe::pipeline::{retarget_session, PipelineParams};
use dexpipe::synth::{generate_session, SynthScene, SynthSpec, SynthTruthFrame, LITTLE_TIP_HUB};
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub session_dir: PathBuf,
    pub spec: SynthSpec,
    pub rig: RigExtrinsics,
    pub truth: Vec<SynthTruthFrame>,
    pub model: HandModel,
}

impl Fixture {
    pub fn new(spec: SynthSpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let session_dir = dir.path().join("session");
        let rig = RigExtrinsics::default_rack();
        let model = HandModel::builtin();
        let truth = generate_session(&session_dir, &spec, &rig, &SynthScene::default(), &model).unwrap();
        Self {
            dir,
            session_dir,
            spec,
            rig,
            truth,
            model,
        }
    }

    pub fn standard() -> Self {
        Self::new(SynthSpec::default())
    }

    pub fn session(&self) -> Session {
        load_session(&self.session_dir).unwrap()
    }

    pub fn dataset(&self) -> Dataset {
        self.dataset_with(&PipelineParams::default())
    }

    pub fn dataset_with(&self, params: &PipelineParams) -> Dataset {
        retarget_session(&self.session(), &self.model, params).unwrap().0
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn setup(dataset: Dataset, kind: PolicyKind, config: &PipelineConfig) -> RolloutSetup {
    RolloutSetup::from_dataset(dataset, kind, 0, config, Arc::new(HandModel::builtin())).unwrap()
}

/// A human hand hovering at the robot's own wrist pose, fingers at the
/// model's mid range, offset by `shift` in the wrist frame.
pub fn human_at(model: &HandModel, wrist: &Pose, shift: Vec3, curl: f64) -> HumanHand {
    let mut q = model.mid_range();
    for (i, v) in q.iter_mut().enumerate() {
        let j = model.joint(i);
        *v = j.clamp(*v + curl * (j.limits[1] - j.limits[0]) * 0.2);
    }
    let tips = fk(model, &q).tips;
    HumanHand {
        wrist: wrist.compose(&Pose::from_translation(shift)),
        tips: [tips[0], tips[1], tips[2], tips[3], Vec3::from(LITTLE_TIP_HUB)],
    }
}

/// A correction script: the right human hand drifts slowly from the initial
/// wrist pose and the pedal is pressed on the given ticks.
pub fn drift_script(model: &HandModel, initial: &BimanualState, ticks: u64, pedal: &[u64]) -> Vec<ScriptLine> {
    (0..ticks)
        .map(|t| {
            let s = t as f64;
            let hand = human_at(
                model,
                &initial.right.wrist,
                Vec3::new(0.002 * s, -0.001 * s, 0.0015 * (0.3 * s).sin()),
                0.5 * (0.2 * s).sin(),
            );
            ScriptLine {
                tick: t,
                wrist: hand.wrist,
                tips: hand.tips_flat(),
                pedal: pedal.contains(&t),
                hand: Side::Right,
            }
        })
        .collect()
}

/// Per-arm wrist translation, wrist rotation and max joint change.
pub fn arm_steps(a: &BimanualState, b: &BimanualState) -> [(f64, f64, f64); 2] {
    [Side::Left, Side::Right].map(|side| {
        let (x, y) = (a.arm(side), b.arm(side));
        let (dt, dr) = dexpipe::geometry::pose_distance(&x.wrist, &y.wrist);
        let dj = x
            .joints
            .iter()
            .zip(&y.joints)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        (dt, dr, dj)
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
