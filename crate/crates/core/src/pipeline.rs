//! Session-to-dataset processing: calibration, stabilization, alignment,
//! cropping, downsampling, retargeting and action labelling.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{chest_cloud_pose, hands_world, HandTrack, Side};
use crate::dataset::{Dataset, DatasetError, DatasetKind, Demo, DemoMeta, Step};
use crate::geometry::{PointCloud, Pose};
use crate::ingest::{loop_closure_drift, resample, resample_stride, segment_demos, IngestError, MocapFrame, Session};
use crate::kinematics::{
    build_action_labels, retarget_frame, BimanualState, HandModel, IkParams, KinematicsError, FINGERS,
};
use crate::perception::{
    align_to_robot_space, crop_table, downsample_uniform, merge_robot_points, stabilize_to_world, unproject,
    LinkGeometry, ObsTensor, PerceptionError, WorkspaceAlignment, DEFAULT_K_HAND, DEFAULT_K_SCENE, STORAGE_POINTS,
};

/// Control rate the capture is resampled to, Hz.
pub const CONTROL_HZ: u32 = 20;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub alignment: WorkspaceAlignment,
    pub k_scene: usize,
    /// Robot hand points for both hands together; split evenly per hand.
    pub k_hand: usize,
    pub seed: u64,
    pub ik: IkParams,
    /// Human-to-robot fingertip scale.
    pub gamma: f64,
    pub target_hz: u32,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            alignment: WorkspaceAlignment::default(),
            k_scene: DEFAULT_K_SCENE,
            k_hand: DEFAULT_K_HAND,
            seed: 0,
            ik: IkParams::default(),
            gamma: 1.0,
            target_hz: CONTROL_HZ,
        }
    }
}

impl PipelineParams {
    /// Settings for the full-resolution stored clouds: scene only, 5000 points.
    pub fn storage() -> Self {
        Self {
            k_scene: STORAGE_POINTS,
            k_hand: 0,
            ..Self::default()
        }
    }

    pub fn k(&self) -> usize {
        self.k_scene + self.k_hand
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.alignment.validate()?;
        if self.k_scene == 0 {
            return Err(PipelineError::Config("k_scene must be positive".into()));
        }
        if self.k_hand % 2 != 0 {
            return Err(PipelineError::Config(format!("k_hand = {} must be even", self.k_hand)));
        }
        if !self.ik.is_valid() {
            return Err(PipelineError::Config("invalid IK parameters".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(PipelineError::Config(format!("gamma = {}", self.gamma)));
        }
        Ok(())
    }

    pub fn link_geometry(&self, model: &HandModel) -> LinkGeometry {
        LinkGeometry::for_model(model, self.k_hand / 2)
    }
}

/// Downsampling seed for one capture frame.
pub fn frame_seed(seed: u64, frame_index: u32) -> u64 {
    seed ^ (frame_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Calibrated hands for one record, in robot space.
pub fn robot_space_hands(session: &Session, frame: &MocapFrame, alignment: &WorkspaceAlignment) -> Result<[HandTrack; 2], PipelineError> {
    let world = hands_world(
        &session.rig,
        &frame.left_reported,
        &frame.right_reported,
        &frame.tips_left_hub,
        &frame.tips_right_hub,
    )
    .map_err(IngestError::from)?;
    let t = alignment.as_pose();
    Ok(world.map(|h| crate::perception::align_hand(&h, &t)))
}

/// World-frame cloud of one record.
pub fn world_cloud(session: &Session, frame: &MocapFrame) -> Result<PointCloud, PipelineError> {
    let depth = session.depth(frame)?;
    let rgb = session.rgb(frame)?;
    let cam = unproject(&depth, &rgb, &session.meta.intrinsics, frame.depth_index as u64)?;
    Ok(stabilize_to_world(&cam, &chest_cloud_pose(&session.rig, &frame.main_reported))?)
}

/// Robot-space, table-cropped scene downsampled to `k` points.
pub fn scene_cloud(session: &Session, frame: &MocapFrame, params: &PipelineParams, k: usize) -> Result<PointCloud, PipelineError> {
    let world = world_cloud(session, frame)?;
    let (aligned, _) = align_to_robot_space(&world, &[], &params.alignment)?;
    let cropped = match params.alignment.z_table {
        Some(z) => crop_table(&aligned, z),
        None => aligned,
    };
    Ok(downsample_uniform(&cropped, k, frame_seed(params.seed, frame.depth_index))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub label: String,
    pub steps: usize,
    pub mean_ik_residual: f64,
    pub max_ik_residual: f64,
    pub max_iterations: usize,
}

/// Per-frame retargeting output for a contiguous, resampled frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RetargetedFrame {
    pub state: BimanualState,
    /// Fingertip residuals, left hand then right.
    pub residuals: [[f64; FINGERS]; 2],
    pub iterations: usize,
}

/// Retargets both hands frame by frame, warm-starting IK from the previous
/// frame's joints.
pub fn retarget_frames(
    session: &Session,
    frames: &[MocapFrame],
    model: &HandModel,
    params: &PipelineParams,
) -> Result<Vec<RetargetedFrame>, PipelineError> {
    let mut prev = [model.mid_range(); 2];
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let hands = robot_space_hands(session, f, &params.alignment)?;
        let mut arms = [None, None];
        let mut residuals = [[0.0; FINGERS]; 2];
        let mut iterations = 0;
        for side in Side::BOTH {
            let i = side as usize;
            let r = retarget_frame(&hands[i].tips, &hands[i].wrist, model, &prev[i], &params.ik, params.gamma);
            prev[i] = r.state.joints;
            residuals[i] = r.residuals;
            iterations = iterations.max(r.iterations);
            arms[i] = Some(r.state);
        }
        out.push(RetargetedFrame {
            state: BimanualState::new(arms[0].unwrap(), arms[1].unwrap()),
            residuals,
            iterations,
        });
    }
    Ok(out)
}

/// Builds one demo from a resampled frame slice: `o_t` from frame `t`'s
/// scene plus the robot hands at `s_t`, and `a_t = s_{t+1}`.
pub fn build_demo(
    session: &Session,
    frames: &[MocapFrame],
    label: &str,
    model: &HandModel,
    params: &PipelineParams,
) -> Result<(Demo, DemoReport), PipelineError> {
    let retargeted = retarget_frames(session, frames, model, params)?;
    let states: Vec<BimanualState> = retargeted.iter().map(|r| r.state).collect();
    let actions = build_action_labels(&states)?;
    let geometry = params.link_geometry(model);
    let steps: Vec<Step> = frames[..actions.len()]
        .par_iter()
        .zip(&states[..actions.len()])
        .zip(&actions)
        .map(|((f, s), a)| {
            let scene = scene_cloud(session, f, params, params.k_scene)?;
            let merged = merge_robot_points(&scene, &[s.left, s.right], model, &geometry);
            Ok(Step {
                obs: ObsTensor::from_cloud(&merged),
                state: *s,
                action: *a,
                mode: None,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let all: Vec<f64> = retargeted.iter().flat_map(|r| r.residuals.iter().flatten().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let report = DemoReport {
        label: label.to_string(),
        steps: steps.len(),
        mean_ik_residual: mean,
        max_ik_residual: all.iter().copied().fold(0.0, f64::max),
        max_iterations: retargeted.iter().map(|r| r.iterations).max().unwrap_or(0),
    };
    let meta = DemoMeta {
        source: session.dir.display().to_string(),
        label: label.to_string(),
        mean_ik_residual: mean,
        alignment: Some(params.alignment),
    };
    Ok((Demo { steps, meta }, report))
}

/// Resampled frame slices for every annotated demo, in annotation order.
pub fn demo_slices(session: &Session, target_hz: u32) -> Result<Vec<(String, Vec<MocapFrame>)>, PipelineError> {
    let annotations = session.annotations()?;
    let slices = segment_demos(&session.frames, &annotations)?;
    annotations
        .iter()
        .zip(slices)
        .map(|(a, s)| Ok((a.label.clone(), resample(s, session.meta.capture_hz, target_hz)?)))
        .collect()
}

/// Retargets every annotated demo of a session into an original dataset.
pub fn retarget_session(
    session: &Session,
    model: &HandModel,
    params: &PipelineParams,
) -> Result<(Dataset, Vec<DemoReport>), PipelineError> {
    params.validate()?;
    let slices = demo_slices(session, params.target_hz)?;
    let built: Vec<(Demo, DemoReport)> = slices
        .par_iter()
        .map(|(label, frames)| build_demo(session, frames, label, model, params))
        .collect::<Result<_, _>>()?;
    let mut ds = Dataset::new(DatasetKind::Original, params.k());
    let mut reports = Vec::with_capacity(built.len());
    for (demo, report) in built {
        ds.push_demo(demo)?;
        reports.push(report);
    }
    Ok((ds, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestDemoReport {
    pub label: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub capture_frames: usize,
    pub resampled_frames: usize,
    pub duration_s: f64,
    /// Start-to-end displacement of the chest tracker over the demo, meters.
    pub chest_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub capture_hz: u32,
    pub target_hz: u32,
    pub stride: usize,
    pub frames: usize,
    pub demos: Vec<IngestDemoReport>,
}

pub fn ingest_report(session: &Session, target_hz: u32) -> Result<IngestReport, PipelineError> {
    let stride = resample_stride(session.meta.capture_hz, target_hz)?;
    let annotations = session.annotations()?;
    let slices = segment_demos(&session.frames, &annotations)?;
    let demos = annotations
        .iter()
        .zip(slices)
        .map(|(a, s)| {
            let chest: Vec<Pose> = s.iter().map(|f| f.main_reported).collect();
            Ok(IngestDemoReport {
                label: a.label.clone(),
                start_frame: a.start_frame,
                end_frame: a.end_frame,
                capture_frames: s.len(),
                resampled_frames: s.len().div_ceil(stride),
                duration_s: s.last().unwrap().t - s[0].t,
                chest_drift: loop_closure_drift(&chest)?,
            })
        })
        .collect::<Result<_, IngestError>>()?;
    Ok(IngestReport {
        capture_hz: session.meta.capture_hz,
        target_hz,
        stride,
        frames: session.frames.len(),
        demos,
    })
}

/// Writes one `K x 6` observation file per resampled frame of every demo to
/// `out/<demo index>/<frame index>.obs`. Returns the number of files.
pub fn export_clouds(session: &Session, params: &PipelineParams, model: &HandModel, out: &Path) -> Result<usize, PipelineError> {
    params.validate()?;
    let slices = demo_slices(session, params.target_hz)?;
    let geometry = params.link_geometry(model);
    let mut jobs = Vec::new();
    for (d, (_, frames)) in slices.iter().enumerate() {
        let dir = out.join(format!("{d:03}"));
        std::fs::create_dir_all(&dir).map_err(PerceptionError::Io)?;
        let states = if params.k_hand > 0 {
            retarget_frames(session, frames, model, params)?.into_iter().map(|r| Some(r.state)).collect()
        } else {
            vec![None; frames.len()]
        };
        for (f, s) in frames.iter().zip(states) {
            jobs.push((dir.join(format!("{:06}.obs", f.depth_index)), f, s));
        }
    }
    jobs.par_iter().try_for_each(|(path, f, s)| {
        let scene = scene_cloud(session, f, params, params.k_scene)?;
        let cloud = match s {
            Some(s) => merge_robot_points(&scene, &[s.left, s.right], model, &geometry),
            None => scene,
        };
        ObsTensor::from_cloud(&cloud).write(path)?;
        Ok::<_, PipelineError>(())
    })?;
    Ok(jobs.len())
}

/// What [`validate_path`] found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub path: String,
    pub kind: String,
    pub items: usize,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

fn check_state(s: &BimanualState, model: &HandModel, what: &str, problems: &mut Vec<String>) {
    if !s.is_finite() {
        problems.push(format!("{what}: non-finite values"));
    } else if !s.within_limits(model) {
        problems.push(format!("{what}: joints outside limits"));
    }
}

pub fn validate_dataset(ds: &Dataset, model: &HandModel) -> Vec<String> {
    let mut problems = Vec::new();
    for (d, demo) in ds.demos().iter().enumerate() {
        for (t, step) in demo.steps.iter().enumerate() {
            if step.obs.k() != ds.k() {
                problems.push(format!("demo {d} step {t}: observation has {} rows, expected {}", step.obs.k(), ds.k()));
            }
            if step.obs.data().iter().any(|v| !v.is_finite()) {
                problems.push(format!("demo {d} step {t}: non-finite observation"));
            }
            check_state(&step.state, model, &format!("demo {d} step {t} state"), &mut problems);
            check_state(&step.action, model, &format!("demo {d} step {t} action"), &mut problems);
            if ds.kind() == DatasetKind::Original {
                if step.mode.is_some() {
                    problems.push(format!("demo {d} step {t}: correction mode in original dataset"));
                }
                if let Some(next) = demo.steps.get(t + 1) {
                    if step.action != next.state {
                        problems.push(format!("demo {d} step {t}: action is not the next state"));
                    }
                }
            } else if step.mode.is_none() {
                problems.push(format!("demo {d} step {t}: correction step without mode"));
            }
        }
    }
    problems
}

fn validate_session_dir(path: &Path) -> Result<ValidationReport, PipelineError> {
    let session = crate::ingest::load_session(path)?;
    let mut problems = Vec::new();
    match session.annotations() {
        Ok(a) => {
            if let Err(e) = crate::ingest::validate_annotations(&a, session.frames.len()) {
                problems.push(e.to_string());
            }
        }
        Err(e) => problems.push(e.to_string()),
    }
    let image_problems: Vec<String> = session
        .frames
        .par_iter()
        .filter_map(|f| {
            session
                .depth(f)
                .and_then(|_| session.rgb(f))
                .err()
                .map(|e| e.to_string())
        })
        .collect();
    problems.extend(image_problems);
    for (i, f) in session.frames.iter().enumerate() {
        let tips = f.tips_left_hub.iter().chain(&f.tips_right_hub);
        let poses = [f.main_reported, f.left_reported, f.right_reported];
        if !poses.iter().all(Pose::is_finite) || tips.flat_map(|t| t.iter()).any(|v| !v.is_finite()) {
            problems.push(format!("frame {i}: non-finite values"));
        }
    }
    Ok(ValidationReport {
        path: path.display().to_string(),
        kind: "session".into(),
        items: session.frames.len(),
        problems,
    })
}

/// Checks a session directory, `.dxd` dataset, `.obs` tensor, rollout log
/// or correction script. Unparseable inputs are errors; content problems go
/// into the report.
pub fn validate_path(path: &Path, model: &HandModel) -> Result<ValidationReport, PipelineError> {
    let report = |kind: &str, items, problems| ValidationReport {
        path: path.display().to_string(),
        kind: kind.into(),
        items,
        problems,
    };
    if path.is_dir() {
        return validate_session_dir(path);
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "dxd" => {
            let ds = crate::dataset::import_dataset(path)?;
            let problems = validate_dataset(&ds, model);
            Ok(report("dataset", ds.step_count(), problems))
        }
        "obs" => {
            let t = ObsTensor::read(path)?;
            let problems = if t.data().iter().all(|v| v.is_finite()) {
                Vec::new()
            } else {
                vec!["non-finite observation values".to_string()]
            };
            Ok(report("observation", t.k(), problems))
        }
        "jsonl" => {
            let text = std::fs::read_to_string(path).map_err(PerceptionError::Io)?;
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
            if first.contains("\"corrected_action\"") {
                let log = crate::control::read_log(path).map_err(|e| PipelineError::Config(e.to_string()))?;
                let mut problems = Vec::new();
                for (i, e) in log.iter().enumerate() {
                    if e.tick != i as u64 {
                        problems.push(format!("line {}: tick {} out of sequence", i + 1, e.tick));
                    }
                    check_state(&e.corrected_action, model, &format!("tick {} corrected action", e.tick), &mut problems);
                    if !e.state.is_finite() || !e.raw_action.is_finite() {
                        problems.push(format!("tick {}: non-finite values", e.tick));
                    }
                }
                Ok(report("rollout_log", log.len(), problems))
            } else {
                let lines = crate::hitl::parse_script(&text, &path.display().to_string())
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                Ok(report("correction_script", lines.len(), Vec::new()))
            }
        }
        other => Err(PipelineError::Config(format!("cannot validate '.{other}' files"))),
    }
}
