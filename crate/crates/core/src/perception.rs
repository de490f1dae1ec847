//! RGB-D frames to fixed-size robot-space observations.
//!
//! The chain is: unproject in the camera frame, stabilize into the world
//! frame with the chest camera pose, apply the operator's workspace
//! alignment, crop below the table, downsample to `k_scene` points and append
//! `k_hand` points sampled on the robot hand links.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::UnitQuaternion;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::HandTrack;
use crate::geometry::{FrameTag, Intrinsics, Point, PointCloud, Pose, Vec3};
use crate::ingest::{DepthImage, RgbImage};
use crate::kinematics::{fk, HandModel, RobotArmState, FINGERS, JOINTS_PER_FINGER};

/// Points kept per stored frame.
pub const STORAGE_POINTS: usize = 5000;
/// Points in a policy observation.
pub const POLICY_POINTS: usize = 1000;
/// Default share of the policy observation sampled on the robot hands.
pub const DEFAULT_K_HAND: usize = 200;
pub const DEFAULT_K_SCENE: usize = POLICY_POINTS - DEFAULT_K_HAND;
/// Color given to every merged robot point.
pub const ROBOT_COLOR: [f64; 3] = [0.0, 0.0, 1.0];
/// Values per observation row: xyz then rgb.
pub const OBS_COLUMNS: usize = 6;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("image {what} is {found_w}x{found_h}, intrinsics expect {width}x{height}")]
    SizeMismatch {
        what: &'static str,
        found_w: u32,
        found_h: u32,
        width: u32,
        height: u32,
    },
    #[error("expected a cloud in {expected}, found {found:?}")]
    FrameTagMismatch {
        expected: &'static str,
        found: FrameTag,
    },
    #[error("cannot downsample an empty cloud")]
    EmptyCloud,
    #[error("downsample target must be at least 1")]
    ZeroTarget,
    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),
    #[error("invalid link geometry: {0}")]
    InvalidGeometry(String),
    #[error("observation file: {0}")]
    ObservationFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Back-projects every valid depth pixel through the pinhole model. Output is
/// in the camera optical frame of capture record `frame_index`.
pub fn unproject(
    depth: &DepthImage,
    rgb: &RgbImage,
    intr: &Intrinsics,
    frame_index: u64,
) -> Result<PointCloud, PerceptionError> {
    for (what, w, h) in [
        ("depth", depth.width, depth.height),
        ("rgb", rgb.width, rgb.height),
    ] {
        if w != intr.width || h != intr.height {
            return Err(PerceptionError::SizeMismatch {
                what,
                found_w: w,
                found_h: h,
                width: intr.width,
                height: intr.height,
            });
        }
    }
    let mut points = Vec::new();
    for v in 0..intr.height {
        for u in 0..intr.width {
            let raw = depth.get(u, v);
            if raw == 0 {
                continue;
            }
            let z = raw as f64 * intr.depth_scale;
            let x = (u as f64 - intr.cx) * z / intr.fx;
            let y = (v as f64 - intr.cy) * z / intr.fy;
            let c = rgb.get(u, v);
            points.push(Point::new(
                Vec3::new(x, y, z),
                c.map(|b| b as f64 / 255.0),
            ));
        }
    }
    Ok(PointCloud::from_points(points, FrameTag::ChestCam(frame_index)))
}

/// Moves a camera-frame cloud into the world frame.
pub fn stabilize_to_world(cloud: &PointCloud, chest_pose_world: &Pose) -> Result<PointCloud, PerceptionError> {
    match cloud.frame {
        FrameTag::ChestCam(_) => Ok(cloud.transformed(chest_pose_world, FrameTag::World)),
        found => Err(PerceptionError::FrameTagMismatch {
            expected: "a chest camera frame",
            found,
        }),
    }
}

/// Operator placement of the captured scene in the robot workspace: a planar
/// shift, a rotation about the vertical axis, and the table height used for
/// cropping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceAlignment {
    pub dx: f64,
    pub dy: f64,
    #[serde(default)]
    pub yaw: f64,
    /// Table height in robot space; points at or below it are cropped.
    /// `None` keeps everything.
    #[serde(default)]
    pub z_table: Option<f64>,
}

impl Default for WorkspaceAlignment {
    fn default() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            yaw: 0.0,
            z_table: None,
        }
    }
}

impl WorkspaceAlignment {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.dx.is_finite() && self.dy.is_finite() && self.yaw.is_finite()) {
            return Err(PerceptionError::InvalidAlignment("non-finite value".into()));
        }
        if self.z_table.is_some_and(|z| !z.is_finite()) {
            return Err(PerceptionError::InvalidAlignment("non-finite z_table".into()));
        }
        if !(self.yaw > -std::f64::consts::PI && self.yaw <= std::f64::consts::PI) {
            return Err(PerceptionError::InvalidAlignment(format!(
                "yaw {} outside (-pi, pi]",
                self.yaw
            )));
        }
        Ok(())
    }

    pub fn as_pose(&self) -> Pose {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), self.yaw),
            Vec3::new(self.dx, self.dy, 0.0),
        )
    }
}

/// Applies the same planar transform to the cloud and to the hand trajectory.
pub fn align_to_robot_space(
    cloud: &PointCloud,
    trajectory: &[HandTrack],
    alignment: &WorkspaceAlignment,
) -> Result<(PointCloud, Vec<HandTrack>), PerceptionError> {
    if cloud.frame != FrameTag::World {
        return Err(PerceptionError::FrameTagMismatch {
            expected: "the world frame",
            found: cloud.frame,
        });
    }
    alignment.validate()?;
    let t = alignment.as_pose();
    let aligned = cloud.transformed(&t, FrameTag::RobotSpace);
    let traj = trajectory.iter().map(|h| align_hand(h, &t)).collect();
    Ok((aligned, traj))
}

pub fn align_hand(hand: &HandTrack, t: &Pose) -> HandTrack {
    HandTrack {
        wrist: t.compose(&hand.wrist),
        tips: hand.tips.map(|p| t.transform_point(&p)),
    }
}

/// Keeps exactly the points strictly above the table plane.
pub fn crop_table(cloud: &PointCloud, z_table: f64) -> PointCloud {
    PointCloud::from_points(
        cloud
            .points
            .iter()
            .filter(|p| p.xyz.z > z_table)
            .copied()
            .collect(),
        cloud.frame,
    )
}

/// Seeded uniform subset of exactly `k` points. Clouds smaller than `k` are
/// padded with uniformly drawn repeats.
pub fn downsample_uniform(cloud: &PointCloud, k: usize, seed: u64) -> Result<PointCloud, PerceptionError> {
    use rand::Rng;
    if k == 0 {
        return Err(PerceptionError::ZeroTarget);
    }
    let n = cloud.len();
    if n == 0 {
        return Err(PerceptionError::EmptyCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = if n >= k {
        rand::seq::index::sample(&mut rng, n, k)
            .into_iter()
            .map(|i| cloud.points[i])
            .collect()
    } else {
        let mut pts = cloud.points.clone();
        pts.extend((n..k).map(|_| cloud.points[rng.gen_range(0..n)]));
        pts
    };
    Ok(PointCloud::from_points(points, cloud.frame))
}

/// What a link primitive is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkAnchor {
    Wrist,
    Joint { finger: usize, joint: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinkShape {
    Sphere { radius: f64 },
    /// Segment along local +x from the origin, `length` long.
    Capsule { radius: f64, length: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPrimitive {
    pub anchor: LinkAnchor,
    /// Placement of the primitive in the anchor frame.
    pub offset: Pose,
    pub shape: LinkShape,
    pub budget: usize,
}

/// Coarse collision-style geometry for one hand. Budgets are per hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    pub links: Vec<LinkPrimitive>,
}

impl LinkGeometry {
    pub fn budget(&self) -> usize {
        self.links.iter().map(|l| l.budget).sum()
    }

    /// Palm box plus one capsule per finger link, sized from the model, with
    /// `budget` surface points spread as evenly as possible.
    pub fn for_model(model: &HandModel, budget: usize) -> Self {
        let mut links = vec![LinkPrimitive {
            anchor: LinkAnchor::Wrist,
            offset: Pose::from_translation(Vec3::new(0.045, 0.0, -0.012)),
            shape: LinkShape::Box {
                half_extents: [0.045, 0.06, 0.012],
            },
            budget: 0,
        }];
        for (f, chain) in model.chains.iter().enumerate() {
            for j in 0..JOINTS_PER_FINGER {
                let next = if j + 1 < JOINTS_PER_FINGER {
                    chain.joints[j + 1].origin
                } else {
                    chain.tip_offset
                };
                let length = next.translation().norm();
                let dir = if length > 0.0 {
                    next.translation() / length
                } else {
                    Vec3::x()
                };
                let rot = UnitQuaternion::rotation_between(&Vec3::x(), &dir)
                    .unwrap_or_else(UnitQuaternion::identity);
                links.push(LinkPrimitive {
                    anchor: LinkAnchor::Joint { finger: f, joint: j },
                    offset: Pose::from_rotation(rot),
                    shape: LinkShape::Capsule {
                        radius: 0.009,
                        length,
                    },
                    budget: 0,
                });
            }
        }
        let n = links.len();
        for (i, l) in links.iter_mut().enumerate() {
            l.budget = budget / n + usize::from(i < budget % n);
        }
        Self { links }
    }

    pub fn validate(&self, expected_budget: usize) -> Result<(), PerceptionError> {
        if self.budget() != expected_budget {
            return Err(PerceptionError::InvalidGeometry(format!(
                "link budgets sum to {}, expected {}",
                self.budget(),
                expected_budget
            )));
        }
        for l in &self.links {
            if let LinkAnchor::Joint { finger, joint } = l.anchor {
                if finger >= FINGERS || joint >= JOINTS_PER_FINGER {
                    return Err(PerceptionError::InvalidGeometry(format!(
                        "anchor finger {finger} joint {joint} out of range"
                    )));
                }
            }
        }
        Ok(())
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

fn fibonacci_sphere(n: usize, radius: f64) -> impl Iterator<Item = Vec3> {
    (0..n).map(move |i| {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = i as f64 * GOLDEN_ANGLE;
        Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
    })
}

/// Deterministic surface samples of a primitive in its own frame.
pub fn surface_points(shape: &LinkShape, n: usize) -> Vec<Vec3> {
    match *shape {
        LinkShape::Sphere { radius } => fibonacci_sphere(n, radius).collect(),
        LinkShape::Capsule { radius, length } => {
            let side = 2.0 * std::f64::consts::PI * radius * length;
            let caps = 4.0 * std::f64::consts::PI * radius * radius;
            let n_side = ((n as f64) * side / (side + caps)).round() as usize;
            let mut pts: Vec<Vec3> = (0..n_side)
                .map(|i| {
                    let x = length * (i as f64 + 0.5) / n_side as f64;
                    let phi = i as f64 * GOLDEN_ANGLE;
                    Vec3::new(x, radius * phi.cos(), radius * phi.sin())
                })
                .collect();
            pts.extend(fibonacci_sphere(n - n_side, radius).map(|p| {
                if p.x >= 0.0 {
                    p + Vec3::new(length, 0.0, 0.0)
                } else {
                    p
                }
            }));
            pts
        }
        LinkShape::Box { half_extents: h } => (0..n)
            .map(|i| {
                let a = 2.0 * ((i as f64 * 0.618_033_988_749_895).fract()) - 1.0;
                let b = 2.0 * ((i as f64 * 0.414_213_562_373_095).fract()) - 1.0;
                let sign = if (i / 3) % 2 == 0 { 1.0 } else { -1.0 };
                match i % 3 {
                    0 => Vec3::new(sign * h[0], a * h[1], b * h[2]),
                    1 => Vec3::new(a * h[0], sign * h[1], b * h[2]),
                    _ => Vec3::new(a * h[0], b * h[1], sign * h[2]),
                }
            })
            .collect(),
    }
}

/// Hand surface points for one arm, in the arm's wrist parent frame.
pub fn robot_points(arm: &RobotArmState, model: &HandModel, geometry: &LinkGeometry) -> Vec<Point> {
    let kin = fk(model, &arm.joints);
    let mut out = Vec::with_capacity(geometry.budget());
    for link in &geometry.links {
        let anchor = match link.anchor {
            LinkAnchor::Wrist => Pose::identity(),
            LinkAnchor::Joint { finger, joint } => kin.joint_poses[finger][joint],
        };
        let frame = arm.wrist.compose(&anchor).compose(&link.offset);
        out.extend(
            surface_points(&link.shape, link.budget)
                .into_iter()
                .map(|p| Point::new(frame.transform_point(&p), ROBOT_COLOR)),
        );
    }
    out
}

/// Appends robot hand points for every arm after the (already downsampled)
/// scene points.
pub fn merge_robot_points(
    cloud: &PointCloud,
    arms: &[RobotArmState],
    model: &HandModel,
    geometry: &LinkGeometry,
) -> PointCloud {
    let mut points = cloud.points.clone();
    for arm in arms {
        points.extend(robot_points(arm, model, geometry));
    }
    PointCloud::from_points(points, cloud.frame)
}

/// A `K x 6` observation: xyz then rgb per row, row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsTensor {
    k: usize,
    data: Vec<f32>,
}

impl ObsTensor {
    pub fn from_cloud(cloud: &PointCloud) -> Self {
        let mut data = Vec::with_capacity(cloud.len() * OBS_COLUMNS);
        for p in &cloud.points {
            data.extend(p.xyz.iter().map(|c| *c as f32));
            data.extend(p.rgb.iter().map(|c| *c as f32));
        }
        Self {
            k: cloud.len(),
            data,
        }
    }

    pub fn from_raw(k: usize, data: Vec<f32>) -> Result<Self, PerceptionError> {
        if data.len() != k * OBS_COLUMNS {
            return Err(PerceptionError::ObservationFormat(format!(
                "{} values cannot form {k} rows of {OBS_COLUMNS}",
                data.len()
            )));
        }
        Ok(Self { k, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * OBS_COLUMNS..(i + 1) * OBS_COLUMNS]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(OBS_COLUMNS)
    }

    /// Shifts every point in the table plane.
    pub fn translate_xy(&mut self, dx: f64, dy: f64) {
        for row in self.data.chunks_exact_mut(OBS_COLUMNS) {
            row[0] = (row[0] as f64 + dx) as f32;
            row[1] = (row[1] as f64 + dy) as f32;
        }
    }

    /// First `n` rows as a point cloud tagged `frame`.
    pub fn to_cloud(&self, n: usize, frame: FrameTag) -> PointCloud {
        PointCloud::from_points(
            self.rows()
                .take(n)
                .map(|r| {
                    Point::new(
                        Vec3::new(r[0] as f64, r[1] as f64, r[2] as f64),
                        [r[3] as f64, r[4] as f64, r[5] as f64],
                    )
                })
                .collect(),
            frame,
        )
    }

    /// Header `u32 K, u32 6` then K*6 little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend((self.k as u32).to_le_bytes());
        out.extend((OBS_COLUMNS as u32).to_le_bytes());
        for v in &self.data {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PerceptionError> {
        if bytes.len() < 8 {
            return Err(PerceptionError::ObservationFormat("truncated header".into()));
        }
        let k = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if cols != OBS_COLUMNS {
            return Err(PerceptionError::ObservationFormat(format!(
                "expected {OBS_COLUMNS} columns, header says {cols}"
            )));
        }
        let body = &bytes[8..];
        if body.len() != k * OBS_COLUMNS * 4 {
            return Err(PerceptionError::ObservationFormat(format!(
                "payload is {} bytes, header implies {}",
                body.len(),
                k * OBS_COLUMNS * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { k, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), PerceptionError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PerceptionError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
