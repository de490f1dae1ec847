//! Rigid transforms, colored point clouds and pinhole intrinsics.
//!
//! Every frame change in the pipeline goes through [`Pose`]. Quaternions are
//! stored in `(w, x, y, z)` order with a non-negative scalar part.

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Tolerance for pure-algebra pose equality.
pub const ALGEBRA_EPS: f64 = 1e-9;
/// Tolerance for pose equality after a serialization round trip.
pub const SERIALIZED_EPS: f64 = 1e-6;

// Quaternions within this distance of unit norm are left untouched.
const RENORM_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("color component {0} outside [0, 1]")]
    ColorOutOfRange(f64),
}

/// Which coordinate frame a cloud or pose is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameTag {
    World,
    ChestCam(u64),
    LeftHub(u64),
    RightHub(u64),
    RobotSpace,
}

/// SE(3) rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 7]", try_from = "[f64; 7]")]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(r: UnitQuaternion<f64>) -> Self {
        Self::new(r, Vec3::zeros())
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self::from_rotation(UnitQuaternion::from_axis_angle(&axis, angle))
    }

    /// Builds a pose from `[w, x, y, z, tx, ty, tz]`.
    pub fn from_pose7(v: [f64; 7]) -> Result<Self, GeometryError> {
        if v.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite("pose7"));
        }
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        let n = q.norm();
        if n == 0.0 {
            return Err(GeometryError::DegenerateQuaternion);
        }
        let unit = if (n - 1.0).abs() > RENORM_SLACK {
            UnitQuaternion::from_quaternion(q)
        } else {
            UnitQuaternion::new_unchecked(q)
        };
        Ok(Self::new(unit, Vec3::new(v[4], v[5], v[6])))
    }

    pub fn to_pose7(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn with_translation(&self, t: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation: t,
        }
    }

    /// `compose(a, b) * x == a * (b * x)`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = renormalize(self.rotation * other.rotation);
        let translation = self.rotation * other.translation + self.translation;
        Pose::new(rotation, translation)
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose::new(rinv, -(rinv * self.translation))
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.to_rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Scales a relative motion: translation linearly, rotation along the
    /// geodesic from identity. `scale(1)` is the pose itself, `scale(0)` the
    /// identity.
    pub fn scale(&self, factor: f64) -> Pose {
        let rotation = self.rotation.powf(factor);
        Pose::new(rotation, self.translation * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.to_pose7().iter().all(|c| c.is_finite())
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if (q.quaternion().norm() - 1.0).abs() > RENORM_SLACK {
        UnitQuaternion::new_normalize(q.into_inner())
    } else {
        q
    }
}

impl From<Pose> for [f64; 7] {
    fn from(p: Pose) -> Self {
        p.to_pose7()
    }
}

impl TryFrom<[f64; 7]> for Pose {
    type Error = GeometryError;

    fn try_from(v: [f64; 7]) -> Result<Self, Self::Error> {
        Pose::from_pose7(v)
    }
}

/// Free-function form of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn transform_point(p: &Pose, x: &Vec3) -> Vec3 {
    p.transform_point(x)
}

/// Returns `(translation error in meters, rotation error in radians)`.
/// The rotation error is the geodesic angle in `[0, pi]` and ignores the
/// quaternion sign.
pub fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    let dt = (a.translation - b.translation).norm();
    (dt, rotation_angle_between(&a.rotation, &b.rotation))
}

pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    let q = rel.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// A colored 3D point. `rgb` components are in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub xyz: Vec3,
    pub rgb: [f64; 3],
}

impl Point {
    pub fn new(xyz: Vec3, rgb: [f64; 3]) -> Self {
        Self { xyz, rgb }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame: FrameTag,
}

impl PointCloud {
    pub fn new(frame: FrameTag) -> Self {
        Self {
            points: Vec::new(),
            frame,
        }
    }

    pub fn from_points(points: Vec<Point>, frame: FrameTag) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for p in &self.points {
            if !p.xyz.iter().all(|c| c.is_finite()) {
                return Err(GeometryError::NonFinite("point xyz"));
            }
            if let Some(c) = p.rgb.iter().find(|c| !(0.0..=1.0).contains(*c)) {
                return Err(GeometryError::ColorOutOfRange(*c));
            }
        }
        Ok(())
    }

    /// Applies `pose` to every point and retags the cloud.
    pub fn transformed(&self, pose: &Pose, frame: FrameTag) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| Point::new(pose.transform_point(&p.xyz), p.rgb))
            .collect();
        PointCloud { points, frame }
    }
}

/// Pinhole camera intrinsics for a depth/color pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}
