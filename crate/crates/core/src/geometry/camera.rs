//! Pinhole and equidistant-fisheye camera models.
//!
//! Camera frame: +z along the optical axis, +x right, +y down. Pixel
//! coordinates put the center of pixel `(i, j)` at `(u, v) = (j, i)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::action::{ActionFrame, ArmId};
use super::rotation::RigidTransform;
use super::GeometryError;

/// Smallest camera-frame depth a pinhole projection accepts.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Pinhole,
    /// `r = f * theta`, valid for `theta < max_theta`.
    EquidistantFisheye { max_theta_millirad: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub kind: CameraKind,
}

/// Pixel position plus depth along the optical axis (pinhole) or range (fisheye).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    pub fn pinhole(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { width, height, fx, fy, cx, cy, kind: CameraKind::Pinhole }
    }

    pub fn fisheye(width: usize, height: usize, f: f64, cx: f64, cy: f64, max_theta: f64) -> Self {
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx,
            cy,
            kind: CameraKind::EquidistantFisheye { max_theta_millirad: (max_theta * 1000.0).round() as u32 },
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidCamera(format!("{self:?}")))
        }
    }

    pub fn max_theta(&self) -> Option<f64> {
        match self.kind {
            CameraKind::Pinhole => None,
            CameraKind::EquidistantFisheye { max_theta_millirad } => Some(max_theta_millirad as f64 / 1000.0),
        }
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Result<Projection, GeometryError> {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        match self.kind {
            CameraKind::Pinhole => {
                if p.z <= MIN_DEPTH {
                    return Err(GeometryError::BehindCamera { depth: p.z });
                }
                Ok(Projection { u: self.fx * p.x / p.z + self.cx, v: self.fy * p.y / p.z + self.cy, depth: p.z })
            }
            CameraKind::EquidistantFisheye { .. } => {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                let theta = rho.atan2(p.z);
                let max_theta = self.max_theta().unwrap_or(std::f64::consts::PI);
                if theta >= max_theta {
                    return Err(GeometryError::OutOfField { theta });
                }
                if rho == 0.0 {
                    if p.z <= 0.0 {
                        return Err(GeometryError::BehindCamera { depth: p.z });
                    }
                    return Ok(Projection { u: self.cx, v: self.cy, depth: p.z });
                }
                let s = theta / rho;
                Ok(Projection {
                    u: self.fx * s * p.x + self.cx,
                    v: self.fy * s * p.y + self.cy,
                    depth: p.norm(),
                })
            }
        }
    }

    /// Unit ray through pixel `(u, v)` in the camera frame.
    pub fn back_project(&self, u: f64, v: f64) -> Vector3<f64> {
        let mx = (u - self.cx) / self.fx;
        let my = (v - self.cy) / self.fy;
        match self.kind {
            CameraKind::Pinhole => Vector3::new(mx, my, 1.0).normalize(),
            CameraKind::EquidistantFisheye { .. } => {
                let theta = (mx * mx + my * my).sqrt();
                if theta == 0.0 {
                    return Vector3::z();
                }
                let s = theta.sin() / theta;
                Vector3::new(s * mx, s * my, theta.cos())
            }
        }
    }

    /// Whether a (possibly fractional) pixel position falls inside the raster.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }
}

/// Where a camera sits: fixed in the world, or rigidly attached to an arm's EEF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraExtrinsics {
    /// Camera-to-world transform.
    Static(RigidTransform),
    /// Camera pose in the EEF frame of `arm`.
    Wrist { arm: ArmId, offset: RigidTransform },
}

impl CameraExtrinsics {
    /// Camera-to-world transform given the current per-arm action frame.
    pub fn camera_to_world(&self, frame: Option<&ActionFrame>) -> Result<RigidTransform, GeometryError> {
        match self {
            CameraExtrinsics::Static(t) => Ok(*t),
            CameraExtrinsics::Wrist { arm, offset } => {
                let state = frame
                    .and_then(|f| f.iter().find(|s| s.arm == *arm))
                    .ok_or(GeometryError::MissingArm(*arm))?;
                Ok(state.pose.to_transform().compose(offset))
            }
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, CameraExtrinsics::Static(_))
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let t = match self {
            CameraExtrinsics::Static(t) => t,
            CameraExtrinsics::Wrist { offset, .. } => offset,
        };
        if t.is_valid() {
            Ok(())
        } else {
            Err(GeometryError::InvalidCamera("extrinsic rotation not orthonormal".into()))
        }
    }
}

/// Projects a world point through a camera posed at `camera_to_world`.
pub fn project(
    point_world: &Vector3<f64>,
    camera: &CameraModel,
    camera_to_world: &RigidTransform,
) -> Result<Projection, GeometryError> {
    let p = camera_to_world.inverse().transform_point(point_world);
    camera.project_camera(&p)
}
