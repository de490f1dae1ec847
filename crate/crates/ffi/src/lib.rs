//! C ABI over the dexpipe geometry, kinematics, dataset and replay policy APIs.
//!
//! Every fallible call returns a [`DexStatus`]. On failure the message is
//! available from [`dex_last_error`] on the same thread. Objects are opaque
//! handles owned by the caller and released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dexpipe::dataset::{import_dataset, Dataset, DatasetError};
use dexpipe::geometry::{Pose, Vec3};
use dexpipe::kinematics::{fk, ik_fingertips, BimanualState, HandModel, IkParams};
use dexpipe::perception::ObsTensor;
use dexpipe::policy::{Observation, Policy, ReplayConfig, ReplayPolicy};

pub const DEX_POSE_LEN: usize = 7;
pub const DEX_FINGERS: usize = 4;
pub const DEX_HAND_JOINTS: usize = 16;
pub const DEX_STATE_LEN: usize = 46;
pub const DEX_OBS_COLUMNS: usize = 6;

const _: () = {
    assert!(DEX_FINGERS == dexpipe::kinematics::FINGERS);
    assert!(DEX_HAND_JOINTS == dexpipe::kinematics::HAND_JOINTS);
    assert!(DEX_STATE_LEN == dexpipe::kinematics::BIMANUAL_STATE_LEN);
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DexStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checksum = 5,
    BufferTooSmall = 6,
    Policy = 7,
    Panic = 8,
}

/// Damped least-squares IK settings.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DexIkParams {
    pub lambda: f64,
    /// Residual tolerance, meters.
    pub tol: f64,
    pub max_iter: u32,
    /// Largest joint change per iteration, radians.
    pub step_clamp: f64,
}

impl From<DexIkParams> for IkParams {
    fn from(p: DexIkParams) -> Self {
        IkParams {
            lambda: p.lambda,
            tol: p.tol,
            max_iter: p.max_iter as usize,
            step_clamp: p.step_clamp,
        }
    }
}

pub struct DexHandModel(HandModel);

pub struct DexDataset(Dataset);

pub struct DexReplayPolicy(ReplayPolicy);

struct Failure(DexStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(DexStatus::InvalidArgument, msg.into())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let status = match e {
            DatasetError::IoError { .. } => DexStatus::Io,
            DatasetError::ChecksumMismatch { .. } => DexStatus::Checksum,
            DatasetError::FormatVersionMismatch { .. } | DatasetError::Malformed(_) => DexStatus::Format,
            _ => DexStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DexStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            DexStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure(DexStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure(DexStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(DexStatus::NullPointer, format!("{name} is null")))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure(DexStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

fn pose_arg(v: &[f64]) -> Result<Pose, Failure> {
    let arr: [f64; 7] = v.try_into().expect("length checked by caller");
    Pose::from_pose7(arr).map_err(|e| Failure::invalid(e.to_string()))
}

fn vec3s<const N: usize>(v: &[f64]) -> [Vec3; N] {
    std::array::from_fn(|i| Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]))
}

unsafe fn out_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(DexStatus::NullPointer, "out is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dex_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn dex_status_name(status: DexStatus) -> *const c_char {
    let s: &'static CStr = match status {
        DexStatus::Ok => c"ok",
        DexStatus::NullPointer => c"null_pointer",
        DexStatus::InvalidArgument => c"invalid_argument",
        DexStatus::Io => c"io",
        DexStatus::Format => c"format",
        DexStatus::Checksum => c"checksum",
        DexStatus::BufferTooSmall => c"buffer_too_small",
        DexStatus::Policy => c"policy",
        DexStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// `out = a ∘ b`. Poses are `[w, x, y, z, tx, ty, tz]`; `out` may alias an input.
///
/// # Safety
/// Each pointer must reference seven doubles.
#[no_mangle]
pub unsafe extern "C" fn dex_pose_compose(a: *const f64, b: *const f64, out: *mut f64) -> DexStatus {
    guard(|| {
        let a = pose_arg(slice(a, DEX_POSE_LEN, "a")?)?;
        let b = pose_arg(slice(b, DEX_POSE_LEN, "b")?)?;
        slice_mut(out, DEX_POSE_LEN, "out")?.copy_from_slice(&a.compose(&b).to_pose7());
        Ok(())
    })
}

/// # Safety
/// `pose` and `out` must reference seven doubles.
#[no_mangle]
pub unsafe extern "C" fn dex_pose_inverse(pose: *const f64, out: *mut f64) -> DexStatus {
    guard(|| {
        let p = pose_arg(slice(pose, DEX_POSE_LEN, "pose")?)?;
        slice_mut(out, DEX_POSE_LEN, "out")?.copy_from_slice(&p.inverse().to_pose7());
        Ok(())
    })
}

/// Applies `pose` to `count` packed xyz points. `out` may alias `points`.
///
/// # Safety
/// `pose` must reference seven doubles; `points` and `out` `3 * count` doubles.
#[no_mangle]
pub unsafe extern "C" fn dex_transform_points(
    pose: *const f64,
    points: *const f64,
    count: usize,
    out: *mut f64,
) -> DexStatus {
    guard(|| {
        let p = pose_arg(slice(pose, DEX_POSE_LEN, "pose")?)?;
        let input = slice(points, 3 * count, "points")?.to_vec();
        let out = slice_mut(out, 3 * count, "out")?;
        for (src, dst) in input.chunks_exact(3).zip(out.chunks_exact_mut(3)) {
            let y = p.transform_point(&Vec3::new(src[0], src[1], src[2]));
            dst.copy_from_slice(y.as_slice());
        }
        Ok(())
    })
}

/// The built-in four-finger hand model.
#[no_mangle]
pub extern "C" fn dex_hand_model_builtin() -> *mut DexHandModel {
    Box::into_raw(Box::new(DexHandModel(HandModel::builtin())))
}

/// Loads a hand model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dex_hand_model_load(path: *const c_char, out: *mut *mut DexHandModel) -> DexStatus {
    guard(|| {
        let model = HandModel::load(path_arg(path)?).map_err(|e| Failure(DexStatus::Format, e.to_string()))?;
        out_handle(out, DexHandModel(model))
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dex_hand_model_free(model: *mut DexHandModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `[lo, hi]` pairs for all joints into `out` (`2 * DEX_HAND_JOINTS` doubles).
///
/// # Safety
/// `model` must be a live handle and `out` must hold 32 doubles.
#[no_mangle]
pub unsafe extern "C" fn dex_hand_model_limits(model: *const DexHandModel, out: *mut f64) -> DexStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let out = slice_mut(out, 2 * DEX_HAND_JOINTS, "out")?;
        for j in 0..DEX_HAND_JOINTS {
            out[2 * j..2 * j + 2].copy_from_slice(&m.joint(j).limits);
        }
        Ok(())
    })
}

/// Fingertip positions in the wrist frame for joint angles `q`, written as
/// four packed xyz triples. `clamped` (nullable) reports whether any angle
/// was outside its limits.
///
/// # Safety
/// `q` must hold 16 doubles and `tips_out` 12.
#[no_mangle]
pub unsafe extern "C" fn dex_fk(
    model: *const DexHandModel,
    q: *const f64,
    tips_out: *mut f64,
    clamped: *mut bool,
) -> DexStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let q: [f64; DEX_HAND_JOINTS] = slice(q, DEX_HAND_JOINTS, "q")?.try_into().unwrap();
        let r = fk(m, &q);
        let out = slice_mut(tips_out, 3 * DEX_FINGERS, "tips_out")?;
        for (f, tip) in r.tips.iter().enumerate() {
            out[3 * f..3 * f + 3].copy_from_slice(tip.as_slice());
        }
        if !clamped.is_null() {
            *clamped = r.clamped;
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn dex_ik_params_default() -> DexIkParams {
    let p = IkParams::default();
    DexIkParams {
        lambda: p.lambda,
        tol: p.tol,
        max_iter: p.max_iter as u32,
        step_clamp: p.step_clamp,
    }
}

/// Solves joint angles reaching the four wrist-frame `targets` (12 doubles).
/// `init` and `params` may be null for mid-range and default settings.
/// `residuals_out` (4 doubles) and `iterations_out` are optional.
///
/// # Safety
/// Non-null pointers must reference buffers of the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn dex_ik_fingertips(
    model: *const DexHandModel,
    targets: *const f64,
    init: *const f64,
    params: *const DexIkParams,
    joints_out: *mut f64,
    residuals_out: *mut f64,
    iterations_out: *mut u32,
) -> DexStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let t = slice(targets, 3 * DEX_FINGERS, "targets")?;
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Failure::invalid("targets must be finite"));
        }
        let init: [f64; DEX_HAND_JOINTS] = if init.is_null() {
            m.mid_range()
        } else {
            slice(init, DEX_HAND_JOINTS, "init")?.try_into().unwrap()
        };
        let params: IkParams = params.as_ref().map_or_else(IkParams::default, |p| (*p).into());
        if !params.is_valid() {
            return Err(Failure::invalid("IK parameters must be positive"));
        }
        let sol = ik_fingertips(m, &vec3s::<DEX_FINGERS>(t), &init, &params);
        slice_mut(joints_out, DEX_HAND_JOINTS, "joints_out")?.copy_from_slice(&sol.joints);
        if !residuals_out.is_null() {
            slice_mut(residuals_out, DEX_FINGERS, "residuals_out")?.copy_from_slice(&sol.residuals);
        }
        if !iterations_out.is_null() {
            *iterations_out = sol.iterations as u32;
        }
        Ok(())
    })
}

/// Opens a `.dxd` dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dex_dataset_open(path: *const c_char, out: *mut *mut DexDataset) -> DexStatus {
    guard(|| {
        let ds = import_dataset(path_arg(path)?)?;
        out_handle(out, DexDataset(ds))
    })
}

/// # Safety
/// `dataset` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dex_dataset_free(dataset: *mut DexDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of demos, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dex_dataset_demo_count(dataset: *const DexDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.demos().len())
}

/// Total number of steps, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dex_dataset_step_count(dataset: *const DexDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.step_count())
}

/// Points per observation, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dex_dataset_points(dataset: *const DexDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.k())
}

/// Steps in demo `demo`.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dex_dataset_demo_len(dataset: *const DexDataset, demo: usize, out: *mut usize) -> DexStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let d = ds.demos().get(demo).ok_or_else(|| Failure::invalid(format!("no demo {demo}")))?;
        *slice_mut(out, 1, "out")?.first_mut().unwrap() = d.steps.len();
        Ok(())
    })
}

/// Copies the state and action of one step (`DEX_STATE_LEN` doubles each).
/// Either output may be null.
///
/// # Safety
/// `dataset` must be a live handle; non-null outputs must hold 46 doubles.
#[no_mangle]
pub unsafe extern "C" fn dex_dataset_step(
    dataset: *const DexDataset,
    demo: usize,
    step: usize,
    state_out: *mut f64,
    action_out: *mut f64,
) -> DexStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let s = ds
            .demos()
            .get(demo)
            .and_then(|d| d.steps.get(step))
            .ok_or_else(|| Failure::invalid(format!("no step {demo}/{step}")))?;
        if !state_out.is_null() {
            slice_mut(state_out, DEX_STATE_LEN, "state_out")?.copy_from_slice(&s.state.to_flat());
        }
        if !action_out.is_null() {
            slice_mut(action_out, DEX_STATE_LEN, "action_out")?.copy_from_slice(&s.action.to_flat());
        }
        Ok(())
    })
}

/// Copies the observation of one step, `k * 6` floats in `[x y z r g b]` rows.
///
/// # Safety
/// `dataset` must be a live handle and `out` must hold `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn dex_dataset_observation(
    dataset: *const DexDataset,
    demo: usize,
    step: usize,
    out: *mut f32,
    capacity: usize,
) -> DexStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let s = ds
            .demos()
            .get(demo)
            .and_then(|d| d.steps.get(step))
            .ok_or_else(|| Failure::invalid(format!("no step {demo}/{step}")))?;
        let data = s.obs.data();
        if capacity < data.len() {
            return Err(Failure(
                DexStatus::BufferTooSmall,
                format!("need {} floats, got {capacity}", data.len()),
            ));
        }
        slice_mut(out, data.len(), "out")?.copy_from_slice(data);
        Ok(())
    })
}

/// Nearest-neighbour replay policy over a copy of `dataset`.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dex_replay_policy_new(
    dataset: *const DexDataset,
    out: *mut *mut DexReplayPolicy,
) -> DexStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?.0.clone();
        let policy =
            ReplayPolicy::new(ds, ReplayConfig::default()).map_err(|e| Failure(DexStatus::Policy, e.to_string()))?;
        out_handle(out, DexReplayPolicy(policy))
    })
}

/// # Safety
/// `policy` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dex_replay_policy_free(policy: *mut DexReplayPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Chunk length `d`, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dex_replay_policy_horizon(policy: *const DexReplayPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.0.horizon())
}

/// Queries the policy. `cloud` holds `k * 6` floats (null when `k` is 0),
/// `state` holds `DEX_STATE_LEN` doubles. Writes `d * DEX_STATE_LEN` doubles
/// to `actions_out`.
///
/// # Safety
/// Pointers must reference buffers of the documented sizes; `actions_out`
/// must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn dex_replay_policy_act(
    policy: *const DexReplayPolicy,
    cloud: *const f32,
    k: usize,
    state: *const f64,
    actions_out: *mut f64,
    capacity: usize,
) -> DexStatus {
    guard(|| {
        let p = &handle(policy, "policy")?.0;
        let data = if k == 0 { Vec::new() } else { slice(cloud, k * DEX_OBS_COLUMNS, "cloud")?.to_vec() };
        let cloud = ObsTensor::from_raw(k, data).map_err(|e| Failure::invalid(e.to_string()))?;
        let state = BimanualState::from_flat(slice(state, DEX_STATE_LEN, "state")?)
            .map_err(|e| Failure::invalid(e.to_string()))?;
        let need = p.horizon() * DEX_STATE_LEN;
        if capacity < need {
            return Err(Failure(DexStatus::BufferTooSmall, format!("need {need} doubles, got {capacity}")));
        }
        let chunk = p
            .act(&Observation { cloud, state })
            .map_err(|e| Failure(DexStatus::Policy, e.to_string()))?;
        let out = slice_mut(actions_out, need, "actions_out")?;
        for (a, dst) in chunk.actions.iter().zip(out.chunks_exact_mut(DEX_STATE_LEN)) {
            dst.copy_from_slice(&a.to_flat());
        }
        Ok(())
    })
}
