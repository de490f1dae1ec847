//! Rack-based constant-transform calibration.
//!
//! Each inside-out tracker reports its pose relative to its own start-up
//! frame. All three trackers start in a rigid rack, so the rack geometry maps
//! every start-up frame into the main (chest) tracker's start-up frame, which
//! is the world frame.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("unknown tracker id `{0}`")]
    UnknownTracker(String),
    #[error("rig is missing the transform for tracker `{0}`")]
    MissingSlot(TrackerId),
    #[error("slot_to_main[main] must be the identity pose")]
    MainSlotNotIdentity,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackerId {
    Main,
    Left,
    Right,
}

impl fmt::Display for TrackerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackerId::Main => "main",
            TrackerId::Left => "left",
            TrackerId::Right => "right",
        })
    }
}

impl FromStr for TrackerId {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "main" => Ok(TrackerId::Main),
            "left" => Ok(TrackerId::Left),
            "right" => Ok(TrackerId::Right),
            other => Err(CalibrationError::UnknownTracker(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn tracker(self) -> TrackerId {
        match self {
            Side::Left => TrackerId::Left,
            Side::Right => TrackerId::Right,
        }
    }
}

/// Constant transforms of the capture rig, read from `rig.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigExtrinsics {
    pub slot_to_main: BTreeMap<TrackerId, Pose>,
    pub cam_to_hub_left: Pose,
    pub cam_to_hub_right: Pose,
    pub tracker_to_lidar: Pose,
}

impl RigExtrinsics {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        for id in [TrackerId::Main, TrackerId::Left, TrackerId::Right] {
            if !self.slot_to_main.contains_key(&id) {
                return Err(CalibrationError::MissingSlot(id));
            }
        }
        if self.slot_to_main[&TrackerId::Main] != Pose::identity() {
            return Err(CalibrationError::MainSlotNotIdentity);
        }
        Ok(())
    }

    pub fn slot(&self, id: TrackerId) -> Result<&Pose, CalibrationError> {
        self.slot_to_main
            .get(&id)
            .ok_or(CalibrationError::MissingSlot(id))
    }

    pub fn cam_to_hub(&self, side: Side) -> &Pose {
        match side {
            Side::Left => &self.cam_to_hub_left,
            Side::Right => &self.cam_to_hub_right,
        }
    }

    /// A plausible chest-rack geometry: glove slots 8 cm below and 6 cm to
    /// either side of the main slot; the depth camera looks forward and
    /// pitched 30 degrees down, with z up in the main tracker frame.
    pub fn default_rack() -> Self {
        let mut slots = BTreeMap::new();
        slots.insert(TrackerId::Main, Pose::identity());
        slots.insert(TrackerId::Left, Pose::from_translation(Vec3::new(0.0, 0.06, -0.08)));
        slots.insert(TrackerId::Right, Pose::from_translation(Vec3::new(0.0, -0.06, -0.08)));
        // Optical frame: z forward, x right, y down. Start from the camera
        // looking along +x of the tracker, then pitch down.
        let optical = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
                0.0, 0.0, 1.0, //
                -1.0, 0.0, 0.0, //
                0.0, -1.0, 0.0,
            )),
        );
        let pitch = nalgebra::UnitQuaternion::from_axis_angle(&Vec3::y_axis(), 30f64.to_radians());
        let hub = Pose::from_translation(Vec3::new(-0.02, 0.0, -0.035));
        Self {
            slot_to_main: slots,
            cam_to_hub_left: hub,
            cam_to_hub_right: hub,
            tracker_to_lidar: Pose::new(pitch * optical, Vec3::new(0.01, 0.0, -0.03)),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let rig: RigExtrinsics =
            serde_json::from_str(&text).map_err(|source| CalibrationError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        rig.validate()?;
        Ok(rig)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rig serializes")
    }
}

/// World pose of a tracker given its self-reported pose.
pub fn tracker_pose_world(
    rig: &RigExtrinsics,
    tracker: TrackerId,
    reported: &Pose,
) -> Result<Pose, CalibrationError> {
    Ok(rig.slot(tracker)?.compose(reported))
}

/// Looks a tracker up by its string id, as found in external files.
pub fn tracker_pose_world_by_name(
    rig: &RigExtrinsics,
    tracker: &str,
    reported: &Pose,
) -> Result<Pose, CalibrationError> {
    tracker_pose_world(rig, tracker.parse()?, reported)
}

/// World pose of a glove hub: the glove camera's world pose followed by the
/// camera-to-hub mount.
pub fn hub_pose_world(wrist_world: &Pose, cam_to_hub: &Pose) -> Pose {
    wrist_world.compose(cam_to_hub)
}

/// Maps five hub-frame fingertip positions into the world frame.
pub fn fingertips_world(wrist_world: &Pose, cam_to_hub: &Pose, tips_hub: &[Vec3; 5]) -> [Vec3; 5] {
    let hub = hub_pose_world(wrist_world, cam_to_hub);
    tips_hub.map(|t| hub.transform_point(&t))
}

/// World pose of the RGB-D optical frame.
pub fn chest_cloud_pose(rig: &RigExtrinsics, main_reported: &Pose) -> Pose {
    let main = rig
        .slot_to_main
        .get(&TrackerId::Main)
        .copied()
        .unwrap_or_default();
    main.compose(main_reported).compose(&rig.tracker_to_lidar)
}

/// A hand in the world (or robot) frame: hub pose plus five fingertips in
/// `[thumb, index, middle, ring, little]` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandTrack {
    pub wrist: Pose,
    pub tips: [Vec3; 5],
}

/// Calibrated world-frame hands for one capture record.
pub fn hands_world(
    rig: &RigExtrinsics,
    left_reported: &Pose,
    right_reported: &Pose,
    tips_left_hub: &[Vec3; 5],
    tips_right_hub: &[Vec3; 5],
) -> Result<[HandTrack; 2], CalibrationError> {
    let mut out = [HandTrack {
        wrist: Pose::identity(),
        tips: [Vec3::zeros(); 5],
    }; 2];
    for (i, (side, reported, tips)) in [
        (Side::Left, left_reported, tips_left_hub),
        (Side::Right, right_reported, tips_right_hub),
    ]
    .into_iter()
    .enumerate()
    {
        let cam = tracker_pose_world(rig, side.tracker(), reported)?;
        let hub = hub_pose_world(&cam, rig.cam_to_hub(side));
        out[i] = HandTrack {
            wrist: hub,
            tips: tips.map(|t| hub.transform_point(&t)),
        };
    }
    Ok(out)
}
