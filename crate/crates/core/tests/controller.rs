mod common;

use std::sync::Arc;

use common::{arm_steps, max_abs_diff, Fixture};
use dexpipe::config::{PipelineConfig, PolicyKind};
use dexpipe::control::{rollout, step_toward, ControllerParams, PlantState, SceneObserver};
use dexpipe::geometry::{FrameTag, Point, PointCloud, Pose, Vec3};
use dexpipe::kinematics::{BimanualState, HandModel, RobotArmState};
use dexpipe::perception::LinkGeometry;
use dexpipe::policy::ConstantPolicy;
use proptest::prelude::*;

fn rest(model: &HandModel) -> BimanualState {
    let arm = |y: f64| RobotArmState::new(Pose::from_translation(Vec3::new(0.4, y, -0.2)), model.mid_range());
    BimanualState::new(arm(0.15), arm(-0.15))
}

fn tiny_observer(model: Arc<HandModel>) -> Box<SceneObserver> {
    let scene = PointCloud::from_points(
        vec![Point::new(Vec3::new(0.5, 0.0, -0.45), [0.5, 0.5, 0.5])],
        FrameTag::RobotSpace,
    );
    Box::new(SceneObserver {
        scene,
        geometry: LinkGeometry::for_model(&model, 4),
        model,
    })
}

fn ticks_to_reach(start: &BimanualState, goal: &BimanualState, params: &ControllerParams) -> usize {
    let mut p = PlantState { state: *start, tick: 0 };
    let mut n = 0;
    while p.state != *goal {
        p = step_toward(&p, goal, params);
        n += 1;
        assert!(n < 10_000);
    }
    n
}

#[test]
fn one_meter_at_a_tenth_per_tick_takes_ten_ticks() {
    let model = HandModel::builtin();
    let params = ControllerParams {
        v_max: 2.0,
        ..ControllerParams::default()
    };
    let start = rest(&model);
    let mut goal = start;
    goal.left.wrist = goal.left.wrist.with_translation(goal.left.wrist.translation() + Vec3::new(1.0, 0.0, 0.0));
    assert_eq!(ticks_to_reach(&start, &goal, &params), 10);
}

#[test]
fn quarter_turn_at_a_tenth_radian_per_tick_takes_sixteen_ticks() {
    let model = HandModel::builtin();
    let params = ControllerParams::default();
    assert!((params.step_r() - 0.1).abs() < 1e-15);
    let start = rest(&model);
    let mut goal = start;
    goal.right.wrist = goal
        .right
        .wrist
        .compose(&Pose::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2));
    assert_eq!(ticks_to_reach(&start, &goal, &params), 16);
}

#[test]
fn unreachable_goal_requeries_every_h_ticks() {
    let model = Arc::new(HandModel::builtin());
    let start = rest(&model);
    let mut far = start;
    far.left.wrist = far.left.wrist.with_translation(Vec3::new(50.0, 0.0, 0.0));
    let policy = Arc::new(ConstantPolicy::new(far, 1).unwrap());
    let params = ControllerParams::default();
    let log = rollout(policy, tiny_observer(model), start, 95, params).unwrap();
    let queries: Vec<u64> = log.iter().filter(|e| e.query_flag).map(|e| e.tick).collect();
    assert_eq!(queries, (0..10).map(|i| i * 10).collect::<Vec<_>>());
}

#[test]
fn replay_from_demo_start_commands_the_demo_actions() {
    let fx = Fixture::standard();
    let ds = fx.dataset();
    let demo = ds.demos()[0].clone();
    let setup = common::setup(ds, PolicyKind::Replay, &PipelineConfig::default());
    let mut r = setup.rollout().unwrap();
    r.run(demo.steps.len() as u64 + 5).unwrap();
    let commanded: Vec<BimanualState> = r.log().iter().filter(|e| e.new_goal).map(|e| e.raw_action).collect();
    assert!(commanded.len() >= demo.steps.len());
    for (i, (c, s)) in commanded.iter().zip(&demo.steps).enumerate() {
        let err = max_abs_diff(&c.to_flat(), &s.action.to_flat());
        assert!(err <= 1e-6, "action {i} differs by {err}");
    }
}

fn arm_strategy() -> impl Strategy<Value = RobotArmState> {
    let model = HandModel::builtin();
    (
        prop::array::uniform3(-1.0f64..1.0),
        prop::array::uniform3(-1.0f64..1.0),
        -3.0f64..3.0,
        prop::array::uniform16(0.0f64..1.0),
    )
        .prop_map(move |(t, axis, angle, u)| {
            let axis = Vec3::from(axis);
            let rot = if axis.norm() > 1e-3 {
                Pose::from_axis_angle(&axis, angle)
            } else {
                Pose::identity()
            };
            let joints = std::array::from_fn(|i| {
                let [lo, hi] = model.joint(i).limits;
                lo + (hi - lo) * u[i]
            });
            RobotArmState::new(rot.with_translation(Vec3::from(t)), joints)
        })
}

proptest! {
    #[test]
    fn steps_never_exceed_per_tick_bounds(
        a in arm_strategy(), b in arm_strategy(), c in arm_strategy(), d in arm_strategy()
    ) {
        let params = ControllerParams::default();
        let goal = BimanualState::new(c, d);
        let mut p = PlantState { state: BimanualState::new(a, b), tick: 0 };
        for _ in 0..40 {
            let next = step_toward(&p, &goal, &params);
            for (dt, dr, dj) in arm_steps(&p.state, &next.state) {
                prop_assert!(dt <= params.step_p() + 1e-12);
                prop_assert!(dr <= params.step_r() + 1e-9);
                prop_assert!(dj <= params.step_j() + 1e-12);
            }
            p = next;
        }
    }
}
