//! Rigid transforms and the two camera models used to map vehicle-frame
//! points to pixels.
//!
//! Frames: the vehicle frame has x forward, y left, z up. Camera frames have
//! z along the optical axis, x to the right and y down. A camera's
//! `extrinsic` maps vehicle coordinates into its camera frame.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;
/// Camera-frame depth at or below which a point cannot be projected.
pub const MIN_DEPTH: f64 = 1e-6;
pub const DEFAULT_FISHEYE_FOV_DEG: f64 = 185.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1 (error {0:e})")]
    NotOrthonormal(f64),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("fish-eye radius is not increasing at {angle_deg}° incidence")]
    NonMonotonicFisheye { angle_deg: f64 },
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionError {
    #[error("point lies behind the camera")]
    BehindCamera,
    #[error("point lies outside the fish-eye field of view")]
    OutOfFov,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

/// Rotation plus translation, mapping `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// Row-major.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeometryError;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Pose::new(m, Vector3::from(r.translation))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| p.rotation[(i, j)])),
            translation: p.translation.into(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        let worst = err.max(det_err);
        if !(worst <= ORTHONORMAL_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotOrthonormal(worst));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation by `yaw` about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_euler(0.0, 0.0, yaw, translation)
    }

    /// Z-Y-X (yaw, pitch, roll) rotation followed by a translation.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw);
        Pose {
            rotation: *r.matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

pub fn transform_point(pose: &Pose, p: &Point3) -> Point3 {
    pose.transform_point(p)
}

/// The transform taking coordinates in the `from` frame to the `to` frame,
/// where both poses place their frame in a common parent: `to⁻¹ ∘ from`.
pub fn relative_pose(from: &Pose, to: &Pose) -> Pose {
    to.inverse().compose(from)
}

/// Extrinsic for a forward-looking camera mounted `height` metres above the
/// vehicle origin with no roll or pitch.
pub fn forward_camera_extrinsic(height: f64) -> Pose {
    // camera x = -vehicle y, camera y = -vehicle z, camera z = vehicle x
    let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let t = -(r * Vector3::new(0.0, 0.0, height));
    Pose { rotation: r, translation: t }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsic: Pose,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32, extrinsic: Pose) -> Result<Self, GeometryError> {
        let cam = PinholeCamera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::Intrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64 && 0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(GeometryError::Intrinsics(format!(
                "principal point ({}, {}) outside {}×{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn project_camera_frame(&self, p: &Point3) -> Result<Pixel, ProjectionError> {
        if p.z <= MIN_DEPTH {
            return Err(ProjectionError::BehindCamera);
        }
        Ok(Pixel {
            u: self.cx + self.fx * p.x / p.z,
            v: self.cy + self.fy * p.y / p.z,
        })
    }

    pub fn project(&self, p_vehicle: &Point3) -> Result<Pixel, ProjectionError> {
        self.project_camera_frame(&self.extrinsic.transform_point(p_vehicle))
    }

    /// Vehicle-frame point on the ray through `(u, v)` at camera-frame depth `depth`.
    pub fn unproject(&self, px: Pixel, depth: f64) -> Point3 {
        let p_cam = Point3::new((px.u - self.cx) / self.fx * depth, (px.v - self.cy) / self.fy * depth, depth);
        self.extrinsic.inverse().transform_point(&p_cam)
    }
}

/// Scaramuzza-style omnidirectional model. The incidence angle θ between
/// the ray and the optical axis maps to an image radius
/// `r(θ) = a0·θ + a1·θ² + a2·θ³ + a3·θ⁴ + a4·θ⁵`; the radial point is then
/// placed in the image with the affine stretch `[c d; e 1]` and the centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeCamera {
    pub poly: [f64; 5],
    pub center: [f64; 2],
    /// `(c, d, e)`; identity is `(1, 0, 0)`.
    pub affine: [f64; 3],
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsic: Pose,
}

fn default_fov() -> f64 {
    DEFAULT_FISHEYE_FOV_DEG
}

impl FisheyeCamera {
    pub fn new(
        poly: [f64; 5],
        center: [f64; 2],
        affine: [f64; 3],
        fov_deg: f64,
        width: u32,
        height: u32,
        extrinsic: Pose,
    ) -> Result<Self, GeometryError> {
        let cam = FisheyeCamera {
            poly,
            center,
            affine,
            fov_deg,
            width,
            height,
            extrinsic,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Checks `r(θ)` strictly increases at 1° steps across the half field of view.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 360.0) {
            return Err(GeometryError::Intrinsics(format!("field of view {}°", self.fov_deg)));
        }
        let half = self.half_fov_deg();
        let mut prev = self.radius(0.0);
        let steps = half.floor() as usize;
        for k in 1..=steps + 1 {
            let deg = (k as f64).min(half);
            let r = self.radius(deg.to_radians());
            if !(r > prev) {
                return Err(GeometryError::NonMonotonicFisheye { angle_deg: deg });
            }
            prev = r;
        }
        Ok(())
    }

    pub fn half_fov_deg(&self) -> f64 {
        self.fov_deg / 2.0
    }

    pub fn radius(&self, theta: f64) -> f64 {
        self.poly.iter().rev().fold(0.0, |acc, a| (acc + a) * theta)
    }

    pub fn project_camera_frame(&self, p: &Point3) -> Result<Pixel, ProjectionError> {
        let rho = p.x.hypot(p.y);
        let theta = rho.atan2(p.z);
        if theta > self.half_fov_deg().to_radians() {
            return Err(ProjectionError::OutOfFov);
        }
        let (xs, ys) = if rho > 0.0 {
            let r = self.radius(theta);
            (r * p.x / rho, r * p.y / rho)
        } else {
            (0.0, 0.0)
        };
        let [c, d, e] = self.affine;
        Ok(Pixel {
            u: c * xs + d * ys + self.center[0],
            v: e * xs + ys + self.center[1],
        })
    }

    pub fn project(&self, p_vehicle: &Point3) -> Result<Pixel, ProjectionError> {
        self.project_camera_frame(&self.extrinsic.transform_point(p_vehicle))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Camera {
    Pinhole(PinholeCamera),
    Fisheye(FisheyeCamera),
}

impl Camera {
    pub fn project(&self, p_vehicle: &Point3) -> Result<Pixel, ProjectionError> {
        match self {
            Camera::Pinhole(c) => c.project(p_vehicle),
            Camera::Fisheye(c) => c.project(p_vehicle),
        }
    }

    pub fn width(&self) -> u32 {
        match self {
            Camera::Pinhole(c) => c.width,
            Camera::Fisheye(c) => c.width,
        }
    }

    pub fn height(&self) -> u32 {
        match self {
            Camera::Pinhole(c) => c.height,
            Camera::Fisheye(c) => c.height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match self {
            Camera::Pinhole(c) => c.validate(),
            Camera::Fisheye(c) => c.validate(),
        }
    }
}

impl From<PinholeCamera> for Camera {
    fn from(c: PinholeCamera) -> Self {
        Camera::Pinhole(c)
    }
}

impl From<FisheyeCamera> for Camera {
    fn from(c: FisheyeCamera) -> Self {
        Camera::Fisheye(c)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;

    #[test]
    fn transform_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&Pose::identity(), &p), p);
        let t = Pose::from_translation(0.0, 0.0, 1.0);
        assert_eq!(t.transform_point(&Point3::origin()), Point3::new(0.0, 0.0, 1.0));
        let yaw = Pose::from_yaw(FRAC_PI_2, Vector3::zeros());
        let q = yaw.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert!((q - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn relative_pose_examples() {
        let p = Pose::from_euler(0.1, -0.2, 0.3, Vector3::new(1.0, 2.0, 3.0));
        assert!(relative_pose(&p, &p).max_abs_diff(&Pose::identity()) < 1e-12);
        let from = Pose::from_translation(1.0, 0.0, 0.0);
        let rel = relative_pose(&from, &Pose::identity());
        assert_eq!(*rel.translation(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(*rel.rotation(), Matrix3::identity());
    }

    #[test]
    fn pose_validation_rejects_scaled_rotation() {
        let m = Matrix3::identity() * 1.001;
        assert!(matches!(Pose::new(m, Vector3::zeros()), Err(GeometryError::NotOrthonormal(_))));
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_json_is_row_major() {
        let p = Pose::from_yaw(0.5, Vector3::new(1.0, -2.0, 0.5));
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["rotation"][0][1].as_f64().unwrap(), p.rotation()[(0, 1)]);
    }

    fn axis_camera(fx: f64) -> PinholeCamera {
        // camera frame equals vehicle frame
        PinholeCamera::new(fx, fx, 320.0, 180.0, 640, 360, Pose::identity()).unwrap()
    }

    #[test]
    fn pinhole_examples() {
        let cam = axis_camera(100.0);
        assert_eq!(cam.project(&Point3::new(0.0, 0.0, 5.0)).unwrap(), Pixel { u: 320.0, v: 180.0 });
        assert_eq!(cam.project(&Point3::new(1.0, 0.0, 10.0)).unwrap(), Pixel { u: 330.0, v: 180.0 });
        assert_eq!(cam.project(&Point3::new(0.0, 0.0, -1.0)), Err(ProjectionError::BehindCamera));
        assert_eq!(cam.project(&Point3::new(0.0, 0.0, 1e-6)), Err(ProjectionError::BehindCamera));
    }

    #[test]
    fn pinhole_rejects_bad_intrinsics() {
        assert!(PinholeCamera::new(0.0, 1.0, 1.0, 1.0, 4, 4, Pose::identity()).is_err());
        assert!(PinholeCamera::new(1.0, 1.0, 4.0, 1.0, 4, 4, Pose::identity()).is_err());
    }

    #[test]
    fn forward_extrinsic_projects_ground_below_horizon() {
        let cam = PinholeCamera::new(100.0, 100.0, 80.0, 48.0, 160, 96, forward_camera_extrinsic(1.5)).unwrap();
        let px = cam.project(&Point3::new(10.0, 0.0, 0.0)).unwrap();
        assert!((px.u - 80.0).abs() < 1e-12);
        assert!((px.v - (48.0 + 15.0)).abs() < 1e-12);
        // a point to the left appears left of centre
        assert!(cam.project(&Point3::new(10.0, 1.0, 1.5)).unwrap().u < 80.0);
    }

    fn linear_fisheye(a0: f64, fov: f64) -> FisheyeCamera {
        FisheyeCamera::new([a0, 0.0, 0.0, 0.0, 0.0], [640.0, 360.0], [1.0, 0.0, 0.0], fov, 1280, 720, Pose::identity()).unwrap()
    }

    #[test]
    fn fisheye_examples() {
        let cam = linear_fisheye(300.0, 185.0);
        assert_eq!(cam.project(&Point3::new(0.0, 0.0, 4.0)).unwrap(), Pixel { u: 640.0, v: 360.0 });
        let theta: f64 = 0.7;
        let p = Point3::new(theta.sin(), 0.0, theta.cos());
        let px = cam.project(&p).unwrap();
        assert!((px.u - 640.0 - 300.0 * theta).abs() < 1e-9);
        assert!((px.v - 360.0).abs() < 1e-9);

        let wide = 120f64.to_radians();
        let p = Point3::new(wide.sin(), 0.0, wide.cos());
        assert_eq!(cam.project(&p), Err(ProjectionError::OutOfFov));
        // 185° field of view reaches slightly behind the image plane
        let behind = 92.0f64.to_radians();
        assert!(cam.project(&Point3::new(behind.sin(), 0.0, behind.cos())).is_ok());
    }

    #[test]
    fn fisheye_rejects_non_monotonic_polynomial() {
        let err = FisheyeCamera::new([300.0, -200.0, 0.0, 0.0, 0.0], [0.0, 0.0], [1.0, 0.0, 0.0], 185.0, 10, 10, Pose::identity());
        assert!(matches!(err, Err(GeometryError::NonMonotonicFisheye { .. })));
    }
}
