//! Capture sessions: the on-disk format, 60 Hz to control-rate resampling,
//! demo slicing and tracking diagnostics.

mod images;
mod session;

pub use images::{DepthImage, RgbImage};
pub use session::{frame_file, load_annotations, load_session, save_annotations, save_session, Session};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::geometry::{Intrinsics, Pose, Vec3};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("meta.json declares {expected} frames but {path} holds {found}")]
    FrameCountMismatch {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("timestamps not strictly increasing at frame {index} in {path}")]
    NonMonotonicTimestamps { path: String, index: usize },
    #[error("malformed record {index} in {path}: {reason}")]
    MalformedRecord {
        path: String,
        index: usize,
        reason: String,
    },
    #[error("capture rate {capture_hz} Hz is not a multiple of {target_hz} Hz")]
    NonDivisibleRate { capture_hz: u32, target_hz: u32 },
    #[error("annotations {first} and {second} overlap")]
    OverlappingAnnotations { first: usize, second: usize },
    #[error("annotation {index} [{start}, {end}] outside session of {frame_count} frames")]
    OutOfRange {
        index: usize,
        start: usize,
        end: usize,
        frame_count: usize,
    },
    #[error("need at least two poses, got {0}")]
    TooFewPoses(usize),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One capture record. Fingertips are in `[thumb, index, middle, ring, little]`
/// order, expressed in the glove hub frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MocapFrame {
    pub t: f64,
    pub main_reported: Pose,
    pub left_reported: Pose,
    pub right_reported: Pose,
    #[serde(with = "tips_serde")]
    pub tips_left_hub: [Vec3; 5],
    #[serde(with = "tips_serde")]
    pub tips_right_hub: [Vec3; 5],
    pub rgb_index: u32,
    pub depth_index: u32,
}

mod tips_serde {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(tips: &[Vec3; 5], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<[f64; 3]> = tips.iter().map(|t| [t.x, t.y, t.z]).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[Vec3; 5], D::Error> {
        let raw = <[[f64; 3]; 5]>::deserialize(d)?;
        Ok(raw.map(|t| Vec3::new(t[0], t[1], t[2])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub capture_hz: u32,
    pub intrinsics: Intrinsics,
    pub frame_count: usize,
    /// Rig file name relative to the session directory.
    #[serde(default = "default_rig_ref")]
    pub rig: String,
}

fn default_rig_ref() -> String {
    "rig.json".to_string()
}

/// Inclusive frame range of one task demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoAnnotation {
    pub start_frame: usize,
    pub end_frame: usize,
    pub label: String,
}

/// Keeps every `capture_hz / target_hz`-th frame starting at index 0.
pub fn resample(
    frames: &[MocapFrame],
    capture_hz: u32,
    target_hz: u32,
) -> Result<Vec<MocapFrame>, IngestError> {
    let stride = resample_stride(capture_hz, target_hz)?;
    Ok(frames.iter().step_by(stride).cloned().collect())
}

pub fn resample_stride(capture_hz: u32, target_hz: u32) -> Result<usize, IngestError> {
    if target_hz == 0 || capture_hz == 0 || capture_hz % target_hz != 0 {
        return Err(IngestError::NonDivisibleRate {
            capture_hz,
            target_hz,
        });
    }
    Ok((capture_hz / target_hz) as usize)
}

/// Checks annotations against a session length; returns them sorted by start.
pub fn validate_annotations(
    annotations: &[DemoAnnotation],
    frame_count: usize,
) -> Result<Vec<(usize, DemoAnnotation)>, IngestError> {
    for (i, a) in annotations.iter().enumerate() {
        if a.start_frame >= a.end_frame || a.end_frame >= frame_count {
            return Err(IngestError::OutOfRange {
                index: i,
                start: a.start_frame,
                end: a.end_frame,
                frame_count,
            });
        }
    }
    let mut sorted: Vec<(usize, DemoAnnotation)> =
        annotations.iter().cloned().enumerate().collect();
    sorted.sort_by_key(|(_, a)| a.start_frame);
    for w in sorted.windows(2) {
        if w[1].1.start_frame <= w[0].1.end_frame {
            let (a, b) = (w[0].0.min(w[1].0), w[0].0.max(w[1].0));
            return Err(IngestError::OverlappingAnnotations {
                first: a,
                second: b,
            });
        }
    }
    Ok(sorted)
}

/// Slices annotated demos out of a frame sequence. Slices come back in
/// annotation order; frames outside every annotation are dropped.
pub fn segment_demos<'a>(
    frames: &'a [MocapFrame],
    annotations: &[DemoAnnotation],
) -> Result<Vec<&'a [MocapFrame]>, IngestError> {
    validate_annotations(annotations, frames.len())?;
    Ok(annotations
        .iter()
        .map(|a| &frames[a.start_frame..=a.end_frame])
        .collect())
}

/// Distance between the first and last positions of a trajectory that should
/// return to its start.
pub fn loop_closure_drift(poses: &[Pose]) -> Result<f64, IngestError> {
    match (poses.first(), poses.last()) {
        (Some(first), Some(last)) if poses.len() >= 2 => {
            Ok((last.translation() - first.translation()).norm())
        }
        _ => Err(IngestError::TooFewPoses(poses.len())),
    }
}
