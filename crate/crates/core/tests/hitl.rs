mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{arm_steps, drift_script, human_at, Fixture};
use dexpipe::calibration::Side;
use dexpipe::config::{correction_meta, PipelineConfig, PolicyKind};
use dexpipe::dataset::{encode_dataset, export_dataset, Dataset, DatasetKind};
use dexpipe::geometry::{Pose, Vec3};
use dexpipe::hitl::{
    apply_delta, parse_script, write_script, CorrectionGains, CorrectionMode, DeltaFrame, HitlError,
    HitlMachine, HitlParams, ScriptLine, ScriptedSource,
};
use dexpipe::kinematics::HandModel;
use dexpipe::service::{serve, ServiceConfig};
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

#[test]
fn zero_gain_rollout_is_tick_identical() {
    let fx = Fixture::standard();
    let ds = fx.dataset();
    let mut config = PipelineConfig::default();
    config.hitl.gains = CorrectionGains::zero();
    let setup = common::setup(ds, PolicyKind::Replay, &config);
    let script = drift_script(&fx.model, &setup.initial, 60, &[]);

    let mut plain = setup.rollout().unwrap();
    plain.run(60).unwrap();
    let mut corrected = setup.corrected_rollout(Box::new(ScriptedSource::new(script))).unwrap();
    corrected.run(60).unwrap();

    for (a, b) in plain.log().iter().zip(corrected.log()) {
        assert_eq!(a.tick, b.tick);
        assert_eq!(a.state, b.state);
        assert_eq!(a.raw_action, b.raw_action);
        assert_eq!(b.raw_action, b.corrected_action);
        assert_eq!(a.query_flag, b.query_flag);
    }
    assert_eq!(plain.log().len(), corrected.log().len());
}

#[test]
fn pedal_with_stationary_human_keeps_commands_continuous() {
    let fx = Fixture::standard();
    let ds = fx.dataset();
    let config = PipelineConfig::default();
    let params = config.controller;
    let setup = common::setup(ds, PolicyKind::Replay, &config);
    let hand = human_at(&fx.model, &setup.initial.right.wrist, Vec3::new(0.01, 0.0, 0.0), 0.3);
    let pedal = [5u64, 9, 14, 15, 22, 31];
    let script: Vec<ScriptLine> = (0..40)
        .map(|t| ScriptLine {
            tick: t,
            wrist: hand.wrist,
            tips: hand.tips_flat(),
            pedal: pedal.contains(&t),
            hand: Side::Right,
        })
        .collect();
    let mut r = setup.corrected_rollout(Box::new(ScriptedSource::new(script))).unwrap();
    r.run(40).unwrap();
    let log = r.log();
    let modes: Vec<_> = log.iter().map(|e| e.mode.unwrap()).collect();
    assert_eq!(modes[4], CorrectionMode::Residual);
    assert_eq!(modes[5], CorrectionMode::Teleop);
    assert_eq!(modes[9], CorrectionMode::Residual);
    for w in log.windows(2) {
        for (dt, dr, _) in arm_steps(&w[0].corrected_action, &w[1].corrected_action) {
            assert!(dt <= params.step_p() + 1e-9, "tick {}: wrist jumped {dt}", w[1].tick);
            assert!(dr <= params.step_r() + 1e-9, "tick {}: wrist turned {dr}", w[1].tick);
        }
    }
}

#[test]
fn teleop_follows_the_human_relative_motion() {
    let model = Arc::new(HandModel::builtin());
    let mut m = HitlMachine::new(HitlParams::default(), model.clone()).unwrap();
    let robot = {
        let arm = dexpipe::kinematics::RobotArmState::new(
            Pose::from_translation(Vec3::new(0.4, -0.15, -0.2)),
            model.mid_range(),
        );
        dexpipe::kinematics::BimanualState::new(arm, arm)
    };
    let h0 = human_at(&model, &Pose::identity(), Vec3::zeros(), 0.0);
    m.observe_human(Side::Right, h0);
    m.correct(&robot);
    assert_eq!(m.pedal(&robot), CorrectionMode::Teleop);
    let h1 = human_at(&model, &Pose::identity(), Vec3::new(0.03, 0.0, 0.0), 0.0);
    m.observe_human(Side::Right, h1);
    let out = m.correct(&robot);
    let moved = out.right.wrist.translation() - robot.right.wrist.translation();
    assert!((moved - Vec3::new(0.03, 0.0, 0.0)).norm() < 1e-12);
    assert_eq!(out.left, robot.left);
}

#[test]
fn residual_delta_scales_with_alpha() {
    let p = Pose::from_translation(Vec3::new(0.3, 0.1, 0.0));
    let r = Pose::identity();
    let n = Pose::from_translation(Vec3::new(0.02, 0.0, 0.0));
    let half = apply_delta(&p, &r, &n, 0.5, DeltaFrame::Local);
    assert!((half.translation() - Vec3::new(0.31, 0.1, 0.0)).norm() < 1e-12);
    let none = apply_delta(&p, &r, &n, 0.0, DeltaFrame::World);
    assert!(dexpipe::geometry::pose_distance(&none, &p).0 < 1e-15);
}

#[test]
fn gains_outside_range_are_rejected() {
    let model = Arc::new(HandModel::builtin());
    for gains in [
        CorrectionGains { alpha: -0.1, beta: 0.0 },
        CorrectionGains { alpha: 1.0, beta: 0.1 },
        CorrectionGains { alpha: f64::NAN, beta: 0.0 },
    ] {
        let params = HitlParams {
            gains,
            ..HitlParams::default()
        };
        assert!(matches!(HitlMachine::new(params, model.clone()), Err(HitlError::InvalidGains(_))));
    }
}

#[test]
fn script_round_trips_and_rejects_bad_lines() {
    let model = HandModel::builtin();
    let init = dexpipe::kinematics::BimanualState::new(
        dexpipe::kinematics::RobotArmState::new(Pose::identity(), model.mid_range()),
        dexpipe::kinematics::RobotArmState::new(Pose::identity(), model.mid_range()),
    );
    let lines = drift_script(&model, &init, 12, &[3, 7]);
    let text = write_script(&lines);
    assert_eq!(parse_script(&text, "s.jsonl").unwrap(), lines);

    let mut swapped = lines.clone();
    swapped.swap(2, 5);
    assert!(matches!(
        parse_script(&write_script(&swapped), "s.jsonl"),
        Err(HitlError::UnorderedScript(_))
    ));
    let broken = text.replacen("\"tick\":4", "\"tock\":4", 1);
    assert!(matches!(
        parse_script(&broken, "s.jsonl"),
        Err(HitlError::MalformedScript { line: 5, .. })
    ));
}

struct Client {
    ws: tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>,
    seq: u64,
}

impl Client {
    async fn connect(url: &str) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Self { ws, seq: 0 }
    }

    async fn send(&mut self, kind: &str, payload: Value) {
        self.seq += 1;
        let env = json!({ "type": kind, "seq": self.seq, "payload": payload });
        self.ws.send(Message::text(env.to_string())).await.unwrap();
    }

    /// Next message that is not a `state_update`.
    async fn reply(&mut self) -> Value {
        loop {
            let v = self.next().await;
            if v["type"] != "state_update" {
                return v;
            }
        }
    }

    async fn next(&mut self) -> Value {
        let msg = tokio::time::timeout(Duration::from_secs(30), self.ws.next())
            .await
            .expect("server went quiet")
            .unwrap()
            .unwrap();
        serde_json::from_str(msg.to_text().unwrap()).unwrap()
    }

    async fn request(&mut self, kind: &str, payload: Value) -> Value {
        self.send(kind, payload).await;
        let r = self.reply().await;
        assert_eq!(r["payload"]["in_reply_to"], json!(self.seq));
        r
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_transcript_matches_scripted_file() {
    const TICKS: u64 = 50;
    let fx = Fixture::standard();
    let ds = fx.dataset();
    let ds_path = fx.path("d.dxd");
    export_dataset(&ds, &ds_path).unwrap();
    let config = PipelineConfig::default();
    let setup = common::setup(ds.clone(), PolicyKind::Replay, &config);
    let script = drift_script(&fx.model, &setup.initial, TICKS, &[12, 25, 33]);

    let mut r = setup.corrected_rollout(Box::new(ScriptedSource::new(script.clone()))).unwrap();
    r.run(TICKS).unwrap();
    let mut expected = Dataset::new(DatasetKind::Correction, ds.k());
    expected.push_demo(r.take_recording(correction_meta(0)).unwrap()).unwrap();

    let handle = serve(ServiceConfig {
        port: 0,
        clock_hz: Some(1000.0),
        pipeline: config,
        ..ServiceConfig::default()
    })
    .await
    .unwrap();
    let mut c = Client::connect(&handle.url()).await;
    let hello = c.request("hello", json!({ "role": "correction", "protocol": "dexpipe/1" })).await;
    assert_eq!(hello["type"], "hello");
    let start = c
        .request(
            "start_rollout",
            json!({ "dataset": ds_path, "policy": "replay", "init_demo": 0, "ticks": TICKS, "paused": true }),
        )
        .await;
    assert_eq!(start["payload"]["phase"], "paused");
    for line in &script {
        let ack = c
            .request(
                "correction_input",
                json!({ "hand": "right", "wrist": line.wrist, "tips": line.tips, "tick": line.tick }),
            )
            .await;
        assert_eq!(ack["type"], "correction_input");
        if line.pedal {
            let ack = c.request("pedal", json!({ "tick": line.tick })).await;
            assert_eq!(ack["type"], "pedal");
        }
    }
    c.request("resume", json!({})).await;
    loop {
        let v = c.next().await;
        if v["type"] == "state_update" && v["payload"]["phase"] == "paused" {
            assert_eq!(v["payload"]["tick"], json!(TICKS - 1));
            break;
        }
    }
    let out = fx.path("d_prime_ws.dxd");
    let saved = c.request("save_d_prime", json!({ "path": out })).await;
    assert_eq!(saved["type"], "save_d_prime", "{saved}");
    handle.shutdown().await;

    let got = std::fs::read(&out).unwrap();
    assert_eq!(got, encode_dataset(&expected));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn protocol_errors_are_reported() {
    let handle = serve(ServiceConfig {
        port: 0,
        ..ServiceConfig::default()
    })
    .await
    .unwrap();
    let mut a = Client::connect(&handle.url()).await;
    let r = a.request("pause", json!({})).await;
    assert_eq!(r["payload"]["code"], "hello_required");
    let r = a.request("hello", json!({ "role": "correction", "protocol": "dexpipe/0" })).await;
    assert_eq!(r["payload"]["code"], "protocol_mismatch");
    a.request("hello", json!({ "role": "correction" })).await;
    let r = a.request("warp", json!({})).await;
    assert_eq!(r["payload"]["code"], "unknown_type");
    let r = a.request("pedal", json!({})).await;
    assert_eq!(r["payload"]["code"], "phase_mismatch");

    a.ws.send(Message::text(json!({ "type": "pause", "seq": 1 }).to_string()))
        .await
        .unwrap();
    assert_eq!(a.reply().await["payload"]["code"], "bad_seq");

    let mut b = Client::connect(&handle.url()).await;
    let r = b.request("hello", json!({ "role": "correction" })).await;
    assert_eq!(r["payload"]["code"], "correction_client_taken");
    b.request("hello", json!({ "role": "viewer" })).await;
    let r = b.request("start_rollout", json!({})).await;
    assert_eq!(r["payload"]["code"], "start_failed");
    handle.shutdown().await;
}
