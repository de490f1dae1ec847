mod common;

use common::Fixture;
use dexpipe::dataset::{
    augment, augment_scene, decode_dataset, draw_translation, encode_dataset, export_dataset, import_dataset,
    inspect, iwr_sample, AugmentRange, Dataset, DatasetError, DatasetKind, Demo, DemoMeta, Step, WorkspaceBounds,
};
use dexpipe::geometry::{FrameTag, Pose, Vec3};
use dexpipe::hitl::CorrectionMode;
use dexpipe::kinematics::{BimanualState, HandModel, RobotArmState};
use dexpipe::perception::ObsTensor;
use proptest::prelude::*;

fn state(x: f64) -> BimanualState {
    let model = HandModel::builtin();
    let arm = |y: f64| RobotArmState::new(Pose::from_translation(Vec3::new(x, y, 0.0)), model.mid_range());
    BimanualState::new(arm(0.2), arm(-0.2))
}

fn toy_demo(k: usize, steps: usize, base: f64) -> Demo {
    Demo {
        steps: (0..steps)
            .map(|i| {
                let data = (0..k * 6).map(|j| (base + i as f64 + j as f64 * 0.01) as f32 * 0.1).collect();
                Step {
                    obs: ObsTensor::from_raw(k, data).unwrap(),
                    state: state(0.1 * i as f64),
                    action: state(0.1 * (i + 1) as f64),
                    mode: match i % 3 {
                        0 => None,
                        1 => Some(CorrectionMode::Residual),
                        _ => Some(CorrectionMode::Teleop),
                    },
                }
            })
            .collect(),
        meta: DemoMeta::new("toy", format!("demo {base}")),
    }
}

fn toy(kind: DatasetKind, demos: &[usize]) -> Dataset {
    let mut ds = Dataset::new(kind, 4);
    for (i, n) in demos.iter().enumerate() {
        ds.push_demo(toy_demo(4, *n, i as f64)).unwrap();
    }
    ds
}

#[test]
fn augmented_hand_to_scene_distances_are_invariant() {
    let fx = Fixture::standard();
    let session = fx.session();
    let params = dexpipe::pipeline::PipelineParams::default();
    let ds = fx.dataset();
    let demo = &ds.demos()[0];
    let scene = dexpipe::pipeline::scene_cloud(&session, &session.frames[12], &params, 800).unwrap();
    let states: Vec<BimanualState> = demo.steps.iter().map(|s| s.state).collect();
    let range = AugmentRange::default();
    let bounds = WorkspaceBounds::default();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (cloud, moved) = augment_scene(&scene, &states, &range, &bounds, seed).unwrap();
        for (s0, s1) in states.iter().zip(&moved) {
            for (p0, p1) in scene.points.iter().zip(&cloud.points) {
                for (a0, a1) in [(&s0.left, &s1.left), (&s0.right, &s1.right)] {
                    let d0 = (p0.xyz - a0.wrist.translation()).norm();
                    let d1 = (p1.xyz - a1.wrist.translation()).norm();
                    worst = worst.max((d0 - d1).abs());
                }
            }
        }
        let aug = augment(demo, &range, &bounds, seed).unwrap();
        let (dx, dy) = draw_translation(&range, seed);
        assert!(dx.abs() <= 0.1 && dy.abs() <= 0.1);
        for (a, b) in demo.steps.iter().zip(&aug.steps) {
            assert_eq!(a.state.left.joints, b.state.left.joints);
            let shift = b.state.right.wrist.translation() - a.state.right.wrist.translation();
            assert!((shift - Vec3::new(dx, dy, 0.0)).norm() < 1e-12);
            for (r0, r1) in a.obs.rows().zip(b.obs.rows()) {
                assert!(((r1[0] - r0[0]) as f64 - dx).abs() < 1e-6);
                assert!(((r1[1] - r0[1]) as f64 - dy).abs() < 1e-6);
                assert_eq!(r0[2..], r1[2..]);
            }
        }
    }
    assert!(worst <= 1e-9, "distance changed by {worst}");
}

#[test]
fn augmentation_out_of_bounds_is_rejected() {
    let demo = toy_demo(4, 5, 0.0);
    let tight = WorkspaceBounds {
        min: [-0.05, -0.25, -0.1],
        max: [0.55, 0.25, 0.1],
    };
    let r = dexpipe::dataset::translate_demo(&demo, 0.06, 0.0, &tight);
    assert!(matches!(r, Err(DatasetError::OutOfWorkspace { .. })));
    assert!(dexpipe::dataset::translate_demo(&demo, 0.0, 0.04, &tight).is_ok());
    let rejected = (0..50)
        .filter(|s| augment(&demo, &AugmentRange::default(), &tight, *s).is_err())
        .count();
    assert!(rejected > 0 && rejected < 50);
}

#[test]
fn iwr_draws_corrections_half_the_time() {
    let d = toy(DatasetKind::Original, &[40, 25, 60]);
    let dp = toy(DatasetKind::Correction, &[7]);
    let draws = iwr_sample(&d, &dp, 10_000, 2024).unwrap();
    let frac = draws.iter().filter(|s| s.source == DatasetKind::Correction).count() as f64 / 10_000.0;
    assert!((frac - 0.5).abs() <= 0.02, "fraction {frac}");
    assert_eq!(draws.len(), 10_000);
    assert_eq!(iwr_sample(&d, &dp, 500, 7).unwrap(), iwr_sample(&d, &dp, 500, 7).unwrap());

    let empty = Dataset::new(DatasetKind::Correction, 4);
    let only = iwr_sample(&d, &empty, 1000, 1).unwrap();
    assert!(only.iter().all(|s| s.source == DatasetKind::Original));
    assert!(matches!(
        iwr_sample(&Dataset::new(DatasetKind::Original, 4), &dp, 10, 1),
        Err(DatasetError::EmptyOriginalDataset)
    ));
}

#[test]
fn dxd_round_trips_bit_identically() {
    let fx = Fixture::standard();
    let ds = fx.dataset();
    let path = fx.path("d.dxd");
    export_dataset(&ds, &path).unwrap();
    let back = import_dataset(&path).unwrap();
    assert_eq!(back, ds);
    let again = fx.path("again.dxd");
    export_dataset(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    let summary = inspect(&path).unwrap();
    assert_eq!(summary.demos, ds.demos().len());
    assert_eq!(summary.steps, ds.step_count());
    assert_eq!(summary.k, 1000);
}

#[test]
fn corrupted_payload_fails_checksum() {
    let ds = toy(DatasetKind::Original, &[3, 4]);
    let bytes = encode_dataset(&ds);
    let mut bad = bytes.clone();
    let at = bytes.len() - 40;
    bad[at] ^= 0x10;
    assert!(matches!(decode_dataset(&bad), Err(DatasetError::ChecksumMismatch { demo: 1 })));
    assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(decode_dataset(&wrong_magic), Err(DatasetError::Malformed(_))));
}

#[test]
fn version_mismatch_is_reported() {
    let ds = toy(DatasetKind::Original, &[2]);
    let bytes = encode_dataset(&ds);
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
    let patched = header.replacen("\"version\":1", "\"version\":7", 1);
    assert_ne!(patched, header);
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(patched.as_bytes());
    out.extend_from_slice(&bytes[8 + len..]);
    assert!(matches!(
        decode_dataset(&out),
        Err(DatasetError::FormatVersionMismatch { found: 7, expected: 1 })
    ));
}

#[test]
fn shape_mismatches_are_refused() {
    let mut ds = Dataset::new(DatasetKind::Original, 5);
    assert!(matches!(ds.push_demo(toy_demo(4, 2, 0.0)), Err(DatasetError::ShapeMismatch { .. })));
    assert!(matches!(
        ds.push_demo(Demo {
            steps: vec![],
            meta: DemoMeta::new("x", "y")
        }),
        Err(DatasetError::EmptyDemo)
    ));
    let obs = ObsTensor::from_raw(2, vec![0.0; 12]).unwrap();
    assert_eq!(obs.to_cloud(2, FrameTag::RobotSpace).len(), 2);
    assert!(ObsTensor::from_raw(2, vec![0.0; 11]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encode_decode_is_identity(lens in prop::collection::vec(1usize..6, 0..4), correction in any::<bool>()) {
        let kind = if correction { DatasetKind::Correction } else { DatasetKind::Original };
        let ds = toy(kind, &lens);
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(encode_dataset(&back), bytes);
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn translation_preserves_pairwise_distances(dx in -0.1f64..0.1, dy in -0.1f64..0.1) {
        let demo = toy_demo(4, 3, 0.0);
        let moved = dexpipe::dataset::translate_demo(&demo, dx, dy, &WorkspaceBounds::default()).unwrap();
        for (a, b) in demo.steps.iter().zip(&moved.steps) {
            let d0 = (a.state.left.wrist.translation() - a.state.right.wrist.translation()).norm();
            let d1 = (b.state.left.wrist.translation() - b.state.right.wrist.translation()).norm();
            prop_assert!((d0 - d1).abs() < 1e-12);
        }
    }
}
