mod common;

use std::collections::HashSet;

use common::Fixture;
use dexpipe::calibration::chest_cloud_pose;
use dexpipe::geometry::{FrameTag, Point, PointCloud, Pose, Vec3};
use dexpipe::ingest::{DepthImage, RgbImage};
use dexpipe::perception::{
    align_to_robot_space, crop_table, downsample_uniform, stabilize_to_world, unproject, LinkGeometry, ObsTensor,
    PerceptionError, WorkspaceAlignment, DEFAULT_K_HAND, DEFAULT_K_SCENE, OBS_COLUMNS, POLICY_POINTS,
    STORAGE_POINTS,
};
use dexpipe::pipeline::{export_clouds, PipelineParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn moving_chest_views_stabilize_to_one_cloud() {
    let fx = Fixture::standard();
    let session = fx.session();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene: Vec<Vec3> = (0..300)
        .map(|_| Vec3::new(rng.gen_range(0.2..1.2), rng.gen_range(-0.5..0.5), rng.gen_range(-0.45..0.1)))
        .collect();
    let picks: Vec<usize> = (0..10).map(|i| i * 23 + 1).collect();
    let clouds: Vec<PointCloud> = picks
        .iter()
        .map(|&i| {
            let truth_cam = fx.truth[i].main_world.compose(&fx.rig.tracker_to_lidar);
            let inv = truth_cam.inverse();
            let cam = PointCloud::from_points(
                scene.iter().map(|p| Point::new(inv.transform_point(p), [0.2, 0.4, 0.6])).collect(),
                FrameTag::ChestCam(i as u64),
            );
            let pose = chest_cloud_pose(&session.rig, &session.frames[i].main_reported);
            stabilize_to_world(&cam, &pose).unwrap()
        })
        .collect();
    let mut distinct_poses = HashSet::new();
    for &i in &picks {
        distinct_poses.insert(format!("{:?}", session.frames[i].main_reported.to_pose7()));
    }
    assert_eq!(distinct_poses.len(), 10);
    for a in &clouds {
        assert_eq!(a.frame, FrameTag::World);
        for b in &clouds {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p.xyz - q.xyz).norm() <= 1e-6);
            }
        }
    }
}

#[test]
fn stabilizing_a_world_cloud_is_refused() {
    let c = PointCloud::new(FrameTag::World);
    assert!(matches!(
        stabilize_to_world(&c, &Pose::identity()),
        Err(PerceptionError::FrameTagMismatch { .. })
    ));
}

#[test]
fn unproject_inverts_the_pinhole_model() {
    let intr = dexpipe::synth::SynthSpec::default().intrinsics;
    let mut depth = DepthImage::new(intr.width, intr.height);
    let rgb = RgbImage::new(intr.width, intr.height);
    depth.set(10, 7, 1500);
    depth.set(40, 30, 800);
    let cloud = unproject(&depth, &rgb, &intr, 0).unwrap();
    assert_eq!(cloud.len(), 2);
    for (p, (u, v)) in cloud.points.iter().zip([(10.0, 7.0), (40.0, 30.0)]) {
        assert!((intr.fx * p.xyz.x / p.xyz.z + intr.cx - u).abs() < 1e-12);
        assert!((intr.fy * p.xyz.y / p.xyz.z + intr.cy - v).abs() < 1e-12);
    }
    let small = DepthImage::new(4, 4);
    assert!(unproject(&small, &rgb, &intr, 0).is_err());
}

#[test]
fn defaults_match_storage_and_policy_sizes() {
    assert_eq!(STORAGE_POINTS, 5000);
    assert_eq!(POLICY_POINTS, 1000);
    assert_eq!(DEFAULT_K_SCENE + DEFAULT_K_HAND, POLICY_POINTS);
    assert_eq!(PipelineParams::storage().k(), STORAGE_POINTS);
    assert_eq!(PipelineParams::default().k(), POLICY_POINTS);
}

fn check_exported(fx: &Fixture, params: &PipelineParams, dir: &str) {
    let out = fx.path(dir);
    let n = export_clouds(&fx.session(), params, &fx.model, &out).unwrap();
    assert!(n > 0);
    let mut seen = 0;
    for demo in std::fs::read_dir(&out).unwrap() {
        for f in std::fs::read_dir(demo.unwrap().path()).unwrap() {
            let obs = ObsTensor::read(&f.unwrap().path()).unwrap();
            assert_eq!(obs.k(), params.k());
            assert_eq!(obs.data().len(), params.k() * OBS_COLUMNS);
            seen += 1;
        }
    }
    assert_eq!(seen, n);
}

#[test]
fn exported_observations_have_exactly_k_rows() {
    let fx = Fixture::standard();
    check_exported(&fx, &PipelineParams::storage(), "storage");
    check_exported(&fx, &PipelineParams::default(), "policy");
    check_exported(
        &fx,
        &PipelineParams {
            k_scene: 300,
            k_hand: 60,
            ..PipelineParams::default()
        },
        "custom",
    );
}

#[test]
fn link_geometry_spends_the_hand_budget() {
    let model = dexpipe::kinematics::HandModel::builtin();
    for budget in [0, 1, 7, 100, 2500] {
        assert_eq!(LinkGeometry::for_model(&model, budget).budget(), budget);
    }
}

fn grid(n: usize) -> PointCloud {
    PointCloud::from_points(
        (0..n)
            .map(|i| Point::new(Vec3::new(i as f64, 0.0, (i % 7) as f64 - 3.0), [0.0, 0.0, 0.0]))
            .collect(),
        FrameTag::RobotSpace,
    )
}

#[test]
fn downsample_is_an_exact_seeded_subset() {
    let cloud = grid(2000);
    let a = downsample_uniform(&cloud, 500, 9).unwrap();
    let b = downsample_uniform(&cloud, 500, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 500);
    let xs: HashSet<i64> = a.points.iter().map(|p| p.xyz.x as i64).collect();
    assert_eq!(xs.len(), 500);
    assert_ne!(a, downsample_uniform(&cloud, 500, 10).unwrap());
    let padded = downsample_uniform(&grid(30), 100, 1).unwrap();
    assert_eq!(padded.len(), 100);
    assert!(downsample_uniform(&grid(0), 10, 1).is_err());
    assert!(downsample_uniform(&cloud, 0, 1).is_err());
}

#[test]
fn downsample_is_uniform() {
    let cloud = grid(100);
    let mut hits = vec![0u32; 100];
    for seed in 0..2000 {
        for p in downsample_uniform(&cloud, 10, seed).unwrap().points {
            hits[p.xyz.x as usize] += 1;
        }
    }
    // Each point is kept with probability 0.1: 200 expected hits, sd ~ 13.4.
    for (i, h) in hits.iter().enumerate() {
        assert!((140..=260).contains(h), "point {i} kept {h} times");
    }
}

#[test]
fn crop_keeps_points_strictly_above_table() {
    let cropped = crop_table(&grid(70), 0.0);
    assert!(cropped.points.iter().all(|p| p.xyz.z > 0.0));
    assert_eq!(cropped.len(), 30);
}

#[test]
fn alignment_moves_cloud_and_hands_together() {
    let mut world = grid(5);
    world.frame = FrameTag::World;
    let hand = dexpipe::calibration::HandTrack {
        wrist: Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)),
        tips: [Vec3::new(1.1, 0.0, 0.0); 5],
    };
    let al = WorkspaceAlignment {
        dx: 0.2,
        dy: -0.1,
        yaw: 0.7,
        z_table: None,
    };
    let (cloud, hands) = align_to_robot_space(&world, &[hand], &al).unwrap();
    assert_eq!(cloud.frame, FrameTag::RobotSpace);
    for (p, q) in world.points.iter().zip(&cloud.points) {
        let d0 = (p.xyz - hand.wrist.translation()).norm();
        let d1 = (q.xyz - hands[0].wrist.translation()).norm();
        assert!((d0 - d1).abs() < 1e-12);
    }
    let bad = WorkspaceAlignment { yaw: 4.0, ..al };
    assert!(align_to_robot_space(&world, &[], &bad).is_err());
}
