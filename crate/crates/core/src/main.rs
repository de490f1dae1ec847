use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dexpipe::calibration::{tracker_pose_world, RigExtrinsics, TrackerId};
use dexpipe::config::{correction_meta, PipelineConfig, PolicyKind, RolloutSetup};
use dexpipe::control::write_log;
use dexpipe::dataset::{
    augment, export_dataset, import_dataset, inspect, AugmentRange, Dataset, DatasetKind, WorkspaceBounds,
};
use dexpipe::geometry::pose_distance;
use dexpipe::hitl::ScriptedSource;
use dexpipe::geometry::Intrinsics;
use dexpipe::ingest::{load_session, loop_closure_drift, DemoAnnotation, Session};
use dexpipe::perception::{WorkspaceAlignment, STORAGE_POINTS};
use dexpipe::pipeline::{export_clouds, ingest_report, retarget_session, validate_path, PipelineParams};
use dexpipe::service::{serve, ServiceConfig};
use dexpipe::synth::{generate_session, SynthScene, SynthSpec};

#[derive(Parser)]
#[command(name = "dexpipe", version, about = "Hand mocap to robot dataset pipeline and rollout harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Rig extrinsics file, replacing the session's own.
    #[arg(long, global = true)]
    rig: Option<PathBuf>,
    /// Robot hand model JSON; the built-in model by default.
    #[arg(long, global = true)]
    hand_model: Option<PathBuf>,
    /// Workspace alignment `dx,dy,yaw` or `dx,dy,yaw,z_table`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    align: Option<String>,
    #[arg(long, global = true)]
    k_scene: Option<usize>,
    #[arg(long, global = true)]
    k_hand: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic capture session with known ground truth.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        /// Keep the chest tracker still.
        #[arg(long)]
        still: bool,
        /// Demo annotation `start:end:label`; repeatable. Replaces the defaults.
        #[arg(long = "demo")]
        demos: Vec<String>,
        /// Image size `WxH`; the focal length scales with the width.
        #[arg(long)]
        image_size: Option<String>,
    },
    /// Check rig extrinsics and world-frame anchoring of a session.
    CalibrateCheck {
        #[arg(long)]
        session: PathBuf,
    },
    /// Resample and segment a session; prints a per-demo report.
    Ingest {
        #[arg(long)]
        session: PathBuf,
    },
    /// Retarget every annotated demo into a `.dxd` dataset.
    Retarget {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-frame observation files (5000 scene points by default).
    Export {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add randomly translated copies of every demo.
    Augment {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long, default_value_t = 0.1)]
        dx_max: f64,
        #[arg(long, default_value_t = 0.1)]
        dy_max: f64,
        /// Keep the original demos in the output.
        #[arg(long)]
        keep_original: bool,
    },
    /// Run a simulated rollout and write its log.
    Rollout {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "replay")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        init_from_demo: usize,
        #[arg(long, default_value_t = 200)]
        ticks: u64,
        #[arg(long)]
        out: PathBuf,
        /// Scripted correction file (JSON lines).
        #[arg(long)]
        corrections: Option<PathBuf>,
        /// Where to write the correction dataset when corrections are given.
        #[arg(long)]
        d_prime: Option<PathBuf>,
    },
    /// Host a live rollout over WebSocket.
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value = "replay")]
        policy: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        clock_hz: Option<f64>,
        #[arg(long, default_value = "d_prime.dxd")]
        d_prime: PathBuf,
    },
    /// Check sessions, datasets, observation files, logs and scripts.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Print a dataset header summary.
    DxdInspect { path: PathBuf },
}

type CliResult = Result<serde_json::Value, Box<dyn std::error::Error>>;

fn parse_align(s: &str) -> Result<WorkspaceAlignment, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("--align '{s}': {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != 3 && v.len() != 4 {
        return Err(format!("--align expects dx,dy,yaw[,z_table], got {} values", v.len()));
    }
    Ok(WorkspaceAlignment {
        dx: v[0],
        dy: v[1],
        yaw: v[2],
        z_table: v.get(3).copied(),
    })
}

fn parse_demo(s: &str) -> Result<DemoAnnotation, String> {
    let mut parts = s.splitn(3, ':');
    let mut frame = |what: &str| {
        parts
            .next()
            .and_then(|p| p.parse::<usize>().ok())
            .ok_or_else(|| format!("--demo '{s}': bad {what} frame"))
    };
    let start_frame = frame("start")?;
    let end_frame = frame("end")?;
    let label = parts.next().unwrap_or("demo").to_string();
    Ok(DemoAnnotation {
        start_frame,
        end_frame,
        label,
    })
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let bad = || format!("--image-size '{s}': expected WxH");
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    let (w, h) = (w.parse::<u32>().map_err(|_| bad())?, h.parse::<u32>().map_err(|_| bad())?);
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn config(common: &Common) -> Result<PipelineConfig, Box<dyn std::error::Error>> {
    let mut cfg = match &common.params {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(a) = &common.align {
        cfg.pipeline.alignment = parse_align(a)?;
    }
    if let Some(k) = common.k_scene {
        cfg.pipeline.k_scene = k;
    }
    if let Some(k) = common.k_hand {
        cfg.pipeline.k_hand = k;
    }
    if let Some(s) = common.seed {
        cfg.pipeline.seed = s;
    }
    if common.rig.is_some() {
        cfg.rig = common.rig.clone();
    }
    if common.hand_model.is_some() {
        cfg.hand_model = common.hand_model.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_session(path: &Path, cfg: &PipelineConfig) -> Result<Session, Box<dyn std::error::Error>> {
    let mut session = load_session(path)?;
    if let Some(rig) = &cfg.rig {
        session.rig = RigExtrinsics::load(rig)?;
    }
    Ok(session)
}

fn run(cli: Cli) -> CliResult {
    let cfg = config(&cli.common)?;
    let model = cfg.hand_model()?;
    match cli.command {
        Command::GenFixture { out, frames, still, demos, image_size } => {
            let mut spec = SynthSpec::default();
            if let Some(n) = frames {
                spec.frames = n;
                spec.demos.retain(|d| d.end_frame < n);
            }
            if !demos.is_empty() {
                spec.demos = demos.iter().map(|d| parse_demo(d)).collect::<Result<_, _>>()?;
            }
            if let Some(size) = image_size {
                let (w, h) = parse_size(&size)?;
                let i = &mut spec.intrinsics;
                let f = i.fx * w as f64 / i.width as f64;
                *i = Intrinsics {
                    fx: f,
                    fy: f,
                    cx: (w as f64 - 1.0) / 2.0,
                    cy: (h as f64 - 1.0) / 2.0,
                    width: w,
                    height: h,
                    depth_scale: i.depth_scale,
                };
            }
            if still {
                spec.chest_sway = 0.0;
            }
            let rig = match &cfg.rig {
                Some(p) => RigExtrinsics::load(p)?,
                None => RigExtrinsics::default_rack(),
            };
            let truth = generate_session(&out, &spec, &rig, &SynthScene::default(), &model)?;
            Ok(json!({ "session": out, "frames": truth.len(), "demos": spec.demos.len() }))
        }
        Command::CalibrateCheck { session } => {
            let s = open_session(&session, &cfg)?;
            s.rig.validate()?;
            let first = s.frames.first().ok_or("session has no frames")?;
            let world0 = tracker_pose_world(&s.rig, TrackerId::Main, &first.main_reported)?;
            let (dt, dr) = pose_distance(&world0, &dexpipe::geometry::Pose::identity());
            let chest: Vec<_> = s.frames.iter().map(|f| f.main_reported).collect();
            let anchored = dt <= dexpipe::geometry::ALGEBRA_EPS && dr <= dexpipe::geometry::ALGEBRA_EPS;
            let report = json!({
                "rig": "ok",
                "frame0_translation_error": dt,
                "frame0_rotation_error": dr,
                "world_anchored": anchored,
                "chest_loop_closure_drift": loop_closure_drift(&chest).ok(),
            });
            if !anchored {
                return Err(format!("main tracker is not at the world origin on frame 0: {report}").into());
            }
            Ok(report)
        }
        Command::Ingest { session } => {
            let s = open_session(&session, &cfg)?;
            Ok(serde_json::to_value(ingest_report(&s, cfg.pipeline.target_hz)?)?)
        }
        Command::Retarget { session, out } => {
            let s = open_session(&session, &cfg)?;
            let (ds, reports) = retarget_session(&s, &model, &cfg.pipeline)?;
            export_dataset(&ds, &out)?;
            Ok(json!({ "dataset": out, "k": ds.k(), "steps": ds.step_count(), "demos": reports }))
        }
        Command::Export { session, out } => {
            let s = open_session(&session, &cfg)?;
            let mut params: PipelineParams = cfg.pipeline;
            if cli.common.k_scene.is_none() && cli.common.params.is_none() {
                params.k_scene = STORAGE_POINTS;
            }
            if cli.common.k_hand.is_none() && cli.common.params.is_none() {
                params.k_hand = 0;
            }
            let n = export_clouds(&s, &params, &model, &out)?;
            Ok(json!({ "out": out, "files": n, "k": params.k() }))
        }
        Command::Augment { dataset, out, copies, dx_max, dy_max, keep_original } => {
            let ds = import_dataset(&dataset)?;
            let range = AugmentRange { dx_max, dy_max };
            let bounds = WorkspaceBounds::default();
            let mut result = Dataset::new(ds.kind(), ds.k());
            let mut rejected = 0;
            for (i, demo) in ds.demos().iter().enumerate() {
                if keep_original {
                    result.push_demo(demo.clone())?;
                }
                for c in 0..copies {
                    let seed = cfg.pipeline.seed ^ ((i * copies + c) as u64).wrapping_mul(0xA24B_AED4_963E_E407);
                    match augment(demo, &range, &bounds, seed) {
                        Ok(d) => result.push_demo(d)?,
                        Err(e) => {
                            log::warn!("demo {i} copy {c}: {e}");
                            rejected += 1;
                        }
                    }
                }
            }
            export_dataset(&result, &out)?;
            Ok(json!({ "dataset": out, "demos": result.demos().len(), "rejected": rejected }))
        }
        Command::Rollout { dataset, policy, init_from_demo, ticks, out, corrections, d_prime } => {
            let ds = import_dataset(&dataset)?;
            let k = ds.k();
            let kind: PolicyKind = policy.parse()?;
            let setup = RolloutSetup::from_dataset(ds, kind, init_from_demo, &cfg, Arc::new(model))?;
            let mut report = json!({ "log": out, "ticks": ticks });
            match corrections {
                Some(script) => {
                    let mut r = setup.corrected_rollout(Box::new(ScriptedSource::load(&script)?))?;
                    r.run(ticks)?;
                    write_log(r.log(), &out)?;
                    if let Some(path) = d_prime {
                        let mut dp = Dataset::new(DatasetKind::Correction, k);
                        if let Some(demo) = r.take_recording(correction_meta(init_from_demo)) {
                            dp.push_demo(demo)?;
                        }
                        export_dataset(&dp, &path)?;
                        report["d_prime"] = json!(path);
                    }
                }
                None => {
                    let mut r = setup.rollout()?;
                    r.run(ticks)?;
                    write_log(r.log(), &out)?;
                }
            }
            Ok(report)
        }
        Command::Serve { port, bind, policy, dataset, clock_hz, d_prime } => {
            let config = ServiceConfig {
                bind,
                port,
                dataset,
                policy: policy.parse()?,
                pipeline: cfg,
                clock_hz,
                d_prime_path: d_prime,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let handle = serve(config).await?;
                eprintln!("listening on {}", handle.url());
                handle.wait().await;
                Ok::<_, Box<dyn std::error::Error>>(())
            })?;
            Ok(json!({ "stopped": true }))
        }
        Command::Validate { paths } => {
            let mut reports = Vec::new();
            let mut clean = true;
            for p in &paths {
                let r = validate_path(p, &model)?;
                clean &= r.is_clean();
                reports.push(r);
            }
            let value = json!({ "clean": clean, "reports": reports });
            if !clean {
                return Err(format!("validation failed: {value}").into());
            }
            Ok(value)
        }
        Command::DxdInspect { path } => Ok(serde_json::to_value(inspect(&path)?)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEXPIPE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            use std::io::Write;
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
