//! Demonstration datasets: the original set `D`, the correction set `D'`,
//! per-demo planar augmentation, equal-probability mixing of the two sets,
//! and the `.dxd` container.
//!
//! # `.dxd` layout
//!
//! ```text
//! "DXD\0"                 4-byte magic
//! u32 LE                  header length in bytes
//! header                  compact JSON, see `FileHeader`
//! for each demo:
//!   payload               steps * step_bytes
//!   u32 LE                CRC32 of the payload
//! ```
//!
//! A step is `K*6` little-endian f32 observation values, the 46-value state
//! and 46-value action as little-endian f64 (left arm pose7 + 16 joints,
//! then right arm), and one mode byte (0 demo, 1 residual, 2 teleop). Demo
//! offsets in the header are relative to the first payload byte.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point, PointCloud};
use crate::hitl::CorrectionMode;
use crate::kinematics::{BimanualState, BIMANUAL_STATE_LEN};
use crate::perception::{ObsTensor, WorkspaceAlignment, OBS_COLUMNS};

pub const DXD_MAGIC: &[u8; 4] = b"DXD\0";
pub const DXD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    IoError {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported dataset format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch in demo {demo}")]
    ChecksumMismatch { demo: usize },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("wrist leaves the workspace after translation ({dx:.4}, {dy:.4})")]
    OutOfWorkspace { dx: f64, dy: f64 },
    #[error("original dataset has no steps")]
    EmptyOriginalDataset,
    #[error("observation has {found} points, dataset expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("demo has no steps")]
    EmptyDemo,
}

/// One training sample `(o_t, s_t, a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: ObsTensor,
    pub state: BimanualState,
    pub action: BimanualState,
    /// Correction mode active when the step was recorded; `None` for
    /// retargeted human demonstrations.
    pub mode: Option<CorrectionMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub source: String,
    pub label: String,
    /// Mean fingertip IK residual over the demo, meters.
    pub mean_ik_residual: f64,
    pub alignment: Option<WorkspaceAlignment>,
}

impl DemoMeta {
    pub fn new(source: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            label: label.into(),
            mean_ik_residual: 0.0,
            alignment: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub steps: Vec<Step>,
    pub meta: DemoMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Original,
    Correction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    k: usize,
    demos: Vec<Demo>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, k: usize) -> Self {
        Self {
            kind,
            k,
            demos: Vec::new(),
        }
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    /// Observation rows per step.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn demos(&self) -> &[Demo] {
        &self.demos
    }

    pub fn push_demo(&mut self, demo: Demo) -> Result<(), DatasetError> {
        if demo.steps.is_empty() {
            return Err(DatasetError::EmptyDemo);
        }
        if let Some(s) = demo.steps.iter().find(|s| s.obs.k() != self.k) {
            return Err(DatasetError::ShapeMismatch {
                expected: self.k,
                found: s.obs.k(),
            });
        }
        self.demos.push(demo);
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.demos.iter().map(|d| d.steps.len()).sum()
    }

    /// `(demo index, step index)` of every step in storage order.
    pub fn step_index(&self) -> Vec<(usize, usize)> {
        self.demos
            .iter()
            .enumerate()
            .flat_map(|(d, demo)| (0..demo.steps.len()).map(move |s| (d, s)))
            .collect()
    }

    pub fn step(&self, demo: usize, step: usize) -> &Step {
        &self.demos[demo].steps[step]
    }
}

/// Axis-aligned bounds the robot wrists must stay inside, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for WorkspaceBounds {
    fn default() -> Self {
        Self {
            min: [-1.0, -1.0, -0.5],
            max: [1.0, 1.0, 1.5],
        }
    }
}

impl WorkspaceBounds {
    pub fn contains(&self, p: &crate::geometry::Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Largest planar shift drawn per demo, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRange {
    pub dx_max: f64,
    pub dy_max: f64,
}

impl Default for AugmentRange {
    fn default() -> Self {
        Self {
            dx_max: 0.1,
            dy_max: 0.1,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(-max..=max)
    } else {
        0.0
    }
}

/// The planar shift `augment` would apply for `seed`.
pub fn draw_translation(range: &AugmentRange, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = draw(&mut rng, range.dx_max.abs());
    let dy = draw(&mut rng, range.dy_max.abs());
    (dx, dy)
}

/// Shifts a whole demo (observations, states and actions) by one planar
/// translation drawn from `seed`. Joint angles are untouched.
pub fn augment(
    demo: &Demo,
    range: &AugmentRange,
    bounds: &WorkspaceBounds,
    seed: u64,
) -> Result<Demo, DatasetError> {
    let (dx, dy) = draw_translation(range, seed);
    translate_demo(demo, dx, dy, bounds)
}

pub fn translate_demo(
    demo: &Demo,
    dx: f64,
    dy: f64,
    bounds: &WorkspaceBounds,
) -> Result<Demo, DatasetError> {
    let mut steps = Vec::with_capacity(demo.steps.len());
    for s in &demo.steps {
        let mut obs = s.obs.clone();
        if dx != 0.0 || dy != 0.0 {
            obs.translate_xy(dx, dy);
        }
        steps.push(Step {
            obs,
            state: shift_state(&s.state, dx, dy, bounds)?,
            action: shift_state(&s.action, dx, dy, bounds)?,
            mode: s.mode,
        });
    }
    Ok(Demo {
        steps,
        meta: demo.meta.clone(),
    })
}

fn shift_state(s: &BimanualState, dx: f64, dy: f64, bounds: &WorkspaceBounds) -> Result<BimanualState, DatasetError> {
    let shift = crate::geometry::Vec3::new(dx, dy, 0.0);
    let mut out = *s;
    for arm in [&mut out.left, &mut out.right] {
        let t = arm.wrist.translation() + shift;
        if !bounds.contains(&t) {
            return Err(DatasetError::OutOfWorkspace { dx, dy });
        }
        arm.wrist = arm.wrist.with_translation(t);
    }
    Ok(out)
}

/// The same seeded shift as [`augment`], applied to a full-precision scene
/// cloud and a state trajectory.
pub fn augment_scene(
    cloud: &PointCloud,
    states: &[BimanualState],
    range: &AugmentRange,
    bounds: &WorkspaceBounds,
    seed: u64,
) -> Result<(PointCloud, Vec<BimanualState>), DatasetError> {
    let (dx, dy) = draw_translation(range, seed);
    let states = states
        .iter()
        .map(|s| shift_state(s, dx, dy, bounds))
        .collect::<Result<_, _>>()?;
    let shift = crate::geometry::Vec3::new(dx, dy, 0.0);
    let points = cloud
        .points
        .iter()
        .map(|p| Point::new(p.xyz + shift, p.rgb))
        .collect();
    Ok((PointCloud::from_points(points, cloud.frame), states))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledStep<'a> {
    pub source: DatasetKind,
    pub demo: usize,
    pub index: usize,
    pub step: &'a Step,
}

/// Draws `n` steps. While `D'` is non-empty each draw first picks `D` or `D'`
/// with a fair coin, then a uniform step within the chosen set.
pub fn iwr_sample<'a>(
    original: &'a Dataset,
    corrections: &'a Dataset,
    n: usize,
    seed: u64,
) -> Result<Vec<SampledStep<'a>>, DatasetError> {
    let d = original.step_index();
    if d.is_empty() {
        return Err(DatasetError::EmptyOriginalDataset);
    }
    let dp = corrections.step_index();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (set, index) = if !dp.is_empty() && rng.gen_bool(0.5) {
                (corrections, &dp)
            } else {
                (original, &d)
            };
            let (demo, step) = index[rng.gen_range(0..index.len())];
            SampledStep {
                source: set.kind(),
                demo,
                index: step,
                step: set.step(demo, step),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    kind: DatasetKind,
    k: usize,
    step_bytes: usize,
    demos: Vec<DemoEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DemoEntry {
    offset: usize,
    length: usize,
    steps: usize,
    crc32: u32,
    meta: DemoMeta,
}

fn step_bytes(k: usize) -> usize {
    k * OBS_COLUMNS * 4 + 2 * BIMANUAL_STATE_LEN * 8 + 1
}

fn mode_byte(m: Option<CorrectionMode>) -> u8 {
    match m {
        None => 0,
        Some(CorrectionMode::Residual) => 1,
        Some(CorrectionMode::Teleop) => 2,
    }
}

fn encode_demo(demo: &Demo, out: &mut Vec<u8>) {
    for s in &demo.steps {
        for v in s.obs.data() {
            out.extend(v.to_le_bytes());
        }
        for v in s.state.to_flat().iter().chain(s.action.to_flat().iter()) {
            out.extend(v.to_le_bytes());
        }
        out.push(mode_byte(s.mode));
    }
}

/// Serializes a dataset to the `.dxd` byte layout.
pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(dataset.demos.len());
    for demo in &dataset.demos {
        let offset = payload.len();
        encode_demo(demo, &mut payload);
        let length = payload.len() - offset;
        let crc32 = crc32fast::hash(&payload[offset..]);
        payload.extend(crc32.to_le_bytes());
        entries.push(DemoEntry {
            offset,
            length,
            steps: demo.steps.len(),
            crc32,
            meta: demo.meta.clone(),
        });
    }
    let header = FileHeader {
        format: "dxd".into(),
        version: DXD_VERSION,
        kind: dataset.kind,
        k: dataset.k,
        step_bytes: step_bytes(dataset.k),
        demos: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend(DXD_MAGIC);
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(header);
    out.extend(payload);
    out
}

fn split_header(bytes: &[u8]) -> Result<(FileHeader, &[u8]), DatasetError> {
    if bytes.len() < 8 || &bytes[..4] != DXD_MAGIC {
        return Err(DatasetError::Malformed("missing DXD magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(DatasetError::Malformed("truncated header".into()));
    }
    let value: serde_json::Value = serde_json::from_slice(&body[..hlen])
        .map_err(|e| DatasetError::Malformed(format!("header: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DXD_VERSION {
        return Err(DatasetError::FormatVersionMismatch {
            found: version,
            expected: DXD_VERSION,
        });
    }
    let header: FileHeader = serde_json::from_value(value)
        .map_err(|e| DatasetError::Malformed(format!("header: {e}")))?;
    Ok((header, &body[hlen..]))
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    let (header, payload) = split_header(bytes)?;
    let sb = step_bytes(header.k);
    if header.step_bytes != sb {
        return Err(DatasetError::Malformed(format!(
            "step_bytes {} does not match K = {}",
            header.step_bytes, header.k
        )));
    }
    let mut ds = Dataset::new(header.kind, header.k);
    for (i, e) in header.demos.iter().enumerate() {
        let end = e.offset + e.length;
        if e.length != e.steps * sb || end + 4 > payload.len() {
            return Err(DatasetError::Malformed(format!("demo {i} extent out of range")));
        }
        let data = &payload[e.offset..end];
        let stored = u32::from_le_bytes(payload[end..end + 4].try_into().unwrap());
        let actual = crc32fast::hash(data);
        if stored != actual || e.crc32 != actual {
            return Err(DatasetError::ChecksumMismatch { demo: i });
        }
        let obs_bytes = header.k * OBS_COLUMNS * 4;
        let mut steps = Vec::with_capacity(e.steps);
        for chunk in data.chunks_exact(sb) {
            let obs: Vec<f32> = chunk[..obs_bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let nums = read_f64s(&chunk[obs_bytes..sb - 1]);
            let bad = |e: crate::kinematics::KinematicsError| DatasetError::Malformed(e.to_string());
            let state = BimanualState::from_flat(&nums[..BIMANUAL_STATE_LEN]).map_err(bad)?;
            let action = BimanualState::from_flat(&nums[BIMANUAL_STATE_LEN..]).map_err(bad)?;
            let mode = match chunk[sb - 1] {
                0 => None,
                1 => Some(CorrectionMode::Residual),
                2 => Some(CorrectionMode::Teleop),
                m => return Err(DatasetError::Malformed(format!("mode byte {m}"))),
            };
            steps.push(Step {
                obs: ObsTensor::from_raw(header.k, obs)
                    .map_err(|e| DatasetError::Malformed(e.to_string()))?,
                state,
                action,
                mode,
            });
        }
        ds.push_demo(Demo {
            steps,
            meta: e.meta.clone(),
        })?;
    }
    Ok(ds)
}

pub fn export_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, encode_dataset(dataset)).map_err(|source| DatasetError::IoError {
        path: path.display().to_string(),
        source,
    })
}

pub fn import_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::IoError {
        path: path.display().to_string(),
        source,
    })?;
    decode_dataset(&bytes)
}

/// Header summary for inspection tools.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub version: u32,
    pub kind: DatasetKind,
    pub k: usize,
    pub demos: usize,
    pub steps: usize,
    pub header: serde_json::Value,
}

pub fn inspect(path: &Path) -> Result<DatasetSummary, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::IoError {
        path: path.display().to_string(),
        source,
    })?;
    let (header, _) = split_header(&bytes)?;
    Ok(DatasetSummary {
        version: header.version,
        kind: header.kind,
        k: header.k,
        demos: header.demos.len(),
        steps: header.demos.iter().map(|d| d.steps).sum(),
        header: serde_json::to_value(&header).expect("header serializes"),
    })
}
