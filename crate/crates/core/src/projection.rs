//! Pinhole geometry: poses, point and Gaussian projection, back-projection.
//!
//! Camera frame is the optical frame (z along the optical axis). A pose's
//! orientation is `R_c^w = Rz(yaw) · Ry(pitch) · Rx(roll)`; the world-to-camera
//! rotation is its transpose. With zero attitude the optical axis points along
//! world +z, which is also the yaw axis.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Rotation3, Vector2, Vector3};
use thiserror::Error;

use crate::gmm_map::GmmComponent;

/// Components whose camera-frame mean is closer than this (m) are dropped.
pub const NEAR_PLANE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w == -PI {
        w = PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length in pixels (square pixels).
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, ProjectionError> {
        if !(f.is_finite() && f > 0.0) {
            return Err(ProjectionError::InvalidIntrinsics(format!("focal length {f}")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(ProjectionError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self { f, cx, cy, width, height })
    }

    /// Centered principal point and the focal length giving `hfov` radians
    /// across the image width.
    pub fn from_fov(width: usize, height: usize, hfov: f64) -> Result<Self, ProjectionError> {
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        Self::new(f, 0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0), width, height)
    }
}

/// Camera pose: position in the world plus ZYX Euler attitude.
///
/// Only position and yaw are estimated; pitch and roll come from the attitude
/// reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Camera origin in world coordinates (m).
    pub position: Vector3<f64>,
    /// Heading in (−π, π].
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Pose {
    pub fn new(position: Vector3<f64>, yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { position, yaw: wrap_angle(yaw), pitch, roll }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), 0.0, 0.0, 0.0)
    }

    /// Camera-to-world rotation `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn orientation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    /// `R_w^c`.
    pub fn world_to_camera_rotation(&self) -> Matrix3<f64> {
        self.orientation().matrix().transpose()
    }

    /// `t_w^c = −R_w^c · position`.
    pub fn world_to_camera_translation(&self) -> Vector3<f64> {
        -(self.world_to_camera_rotation() * self.position)
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera_rotation() * (p_world - self.position)
    }

    pub fn to_world(&self, p_camera: &Vector3<f64>) -> Vector3<f64> {
        self.orientation() * p_camera + self.position
    }

    /// Pose whose position and orientation come from a camera-to-world rotation.
    pub fn from_rotation(position: Vector3<f64>, rotation: &Rotation3<f64>) -> Self {
        let (roll, pitch, yaw) = rotation.euler_angles();
        Self::new(position, yaw, pitch, roll)
    }
}

/// A projected component: a 2D Gaussian in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
}

/// Expresses a component in the camera frame: `R μ + t`, `R Σ Rᵀ`.
pub fn to_camera_frame(pose: &Pose, component: &GmmComponent) -> GmmComponent {
    let r = pose.world_to_camera_rotation();
    let mean = r * (component.mean() - pose.position);
    let cov = r * component.covariance() * r.transpose();
    GmmComponent::from_parts_unchecked(component.weight(), mean, cov)
}

/// Pinhole projection of a camera-frame point; the result may fall outside the image.
pub fn project_point(intr: &CameraIntrinsics, p: &Vector3<f64>) -> Result<Vector2<f64>, ProjectionError> {
    if !(p.z > 0.0) {
        return Err(ProjectionError::BehindCamera(p.z));
    }
    Ok(Vector2::new(intr.cx + intr.f * p.x / p.z, intr.cy + intr.f * p.y / p.z))
}

/// ∂π/∂P at a camera-frame point, in pixels per meter.
pub fn projection_jacobian(intr: &CameraIntrinsics, p: &Vector3<f64>) -> Result<Matrix2x3<f64>, ProjectionError> {
    if !(p.z > 0.0) {
        return Err(ProjectionError::BehindCamera(p.z));
    }
    let iz = 1.0 / p.z;
    let f = intr.f;
    Ok(Matrix2x3::new(f * iz, 0.0, -f * p.x * iz * iz, 0.0, f * iz, -f * p.y * iz * iz))
}

/// First-order projection of a world-frame component into the image,
/// linearized at the transformed mean.
pub fn project_component(
    intr: &CameraIntrinsics,
    pose: &Pose,
    component: &GmmComponent,
) -> Result<Gaussian2D, ProjectionError> {
    let r = pose.world_to_camera_rotation();
    project_rotated(intr, &r, &pose.position, component.mean(), component.covariance())
}

/// Shared kernel: `r` is `R_w^c`, `position` the camera origin.
#[inline]
pub(crate) fn project_rotated(
    intr: &CameraIntrinsics,
    r: &Matrix3<f64>,
    position: &Vector3<f64>,
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
) -> Result<Gaussian2D, ProjectionError> {
    let pc = r * (mean - position);
    if pc.z < NEAR_PLANE {
        return Err(ProjectionError::BehindCamera(pc.z));
    }
    let j = projection_jacobian(intr, &pc)?;
    // J (R Σ Rᵀ) Jᵀ = (J R) Σ (J R)ᵀ
    let jr = j * r;
    let covariance = jr * cov * jr.transpose();
    let covariance = (covariance + covariance.transpose()) * 0.5;
    Ok(Gaussian2D { mean: project_point(intr, &pc)?, covariance })
}

/// Inverse projection of pixel `(u, v)` with z-depth `depth` into the camera frame.
pub fn back_project(intr: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, ProjectionError> {
    if !(depth > 0.0) {
        return Err(ProjectionError::NonPositiveDepth(depth));
    }
    Ok(Vector3::new((u - intr.cx) * depth / intr.f, (v - intr.cy) * depth / intr.f, depth))
}
